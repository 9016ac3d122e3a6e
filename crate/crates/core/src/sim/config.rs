//! `WorldConfig` and its plain `key = value` text form.
//!
//! ```text
//! # comment
//! devices = 64
//! custodians = 3
//! delegation = 6
//! threshold = 4
//! jurisdictions = north:40, south:24
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::device::{DEFAULT_EPOCH_LENGTH, DEFAULT_FAILSAFE_TIMEOUT};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub devices: u64,
    pub custodians: u32,
    pub delegation: usize,
    pub threshold: usize,
    pub epochs: u64,
    pub corruption_fraction: f64,
    pub dropout_fraction: f64,
    /// Custodians that do not collude with the adversary. The rest hand over their shares.
    pub honest_custodians: u32,
    pub seed: u64,
    /// Named partition of the devices, in order. Empty means a single list.
    pub jurisdictions: Vec<(String, u64)>,
    pub epoch_length: u64,
    pub failsafe_timeout: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            devices: 64,
            custodians: 3,
            delegation: 6,
            threshold: 4,
            epochs: 1,
            corruption_fraction: 0.0,
            dropout_fraction: 0.0,
            honest_custodians: 3,
            seed: 0,
            jurisdictions: Vec::new(),
            epoch_length: DEFAULT_EPOCH_LENGTH,
            failsafe_timeout: DEFAULT_FAILSAFE_TIMEOUT,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.threshold == 0
            || self.threshold > self.delegation
            || self.delegation as u64 > self.devices
        {
            return bad(format!(
                "need 1 ≤ t ≤ D ≤ N, got t={}, D={}, N={}",
                self.threshold, self.delegation, self.devices
            ));
        }
        if self.custodians == 0 || self.honest_custodians > self.custodians {
            return bad(format!(
                "need k ≥ 1 and honest ≤ k, got k={}, honest={}",
                self.custodians, self.honest_custodians
            ));
        }
        for (name, f) in [
            ("corruption_fraction", self.corruption_fraction),
            ("dropout_fraction", self.dropout_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must be in [0, 1], got {f}"));
            }
        }
        if self.epoch_length == 0 {
            return bad("epoch_length must be positive".into());
        }
        if !self.jurisdictions.is_empty() {
            let total: u64 = self.jurisdictions.iter().map(|(_, n)| n).sum();
            if total != self.devices {
                return bad(format!(
                    "jurisdictions cover {total} devices, expected {}",
                    self.devices
                ));
            }
            let mut names: Vec<&str> = self.jurisdictions.iter().map(|(n, _)| n.as_str()).collect();
            names.sort_unstable();
            names.dedup();
            if names.len() != self.jurisdictions.len() {
                return bad("duplicate jurisdiction name".into());
            }
        }
        Ok(())
    }

    pub fn corrupted_count(&self) -> u64 {
        crate::analysis::corrupted_count(self.devices, self.corruption_fraction)
    }

    pub fn dropout_count(&self) -> u64 {
        crate::analysis::corrupted_count(self.devices, self.dropout_fraction)
    }
}

fn parse_num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Syntax {
        line,
        message: format!("cannot parse {key} = {value:?}"),
    })
}

impl FromStr for WorldConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cfg = WorldConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected key = value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "devices" => cfg.devices = parse_num(line, key, value)?,
                "custodians" => cfg.custodians = parse_num(line, key, value)?,
                "delegation" => cfg.delegation = parse_num(line, key, value)?,
                "threshold" => cfg.threshold = parse_num(line, key, value)?,
                "epochs" => cfg.epochs = parse_num(line, key, value)?,
                "corruption_fraction" => cfg.corruption_fraction = parse_num(line, key, value)?,
                "dropout_fraction" => cfg.dropout_fraction = parse_num(line, key, value)?,
                "honest_custodians" => cfg.honest_custodians = parse_num(line, key, value)?,
                "seed" => cfg.seed = parse_num(line, key, value)?,
                "epoch_length" => cfg.epoch_length = parse_num(line, key, value)?,
                "failsafe_timeout" => cfg.failsafe_timeout = parse_num(line, key, value)?,
                "jurisdictions" => {
                    cfg.jurisdictions = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|part| {
                            let (name, n) =
                                part.split_once(':').ok_or_else(|| ConfigError::Syntax {
                                    line,
                                    message: format!("expected name:count, got {part:?}"),
                                })?;
                            Ok((name.trim().to_string(), parse_num(line, key, n.trim())?))
                        })
                        .collect::<Result<_, ConfigError>>()?;
                }
                _ => {
                    return Err(ConfigError::Syntax {
                        line,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for WorldConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "devices = {}", self.devices)?;
        writeln!(f, "custodians = {}", self.custodians)?;
        writeln!(f, "delegation = {}", self.delegation)?;
        writeln!(f, "threshold = {}", self.threshold)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "corruption_fraction = {}", self.corruption_fraction)?;
        writeln!(f, "dropout_fraction = {}", self.dropout_fraction)?;
        writeln!(f, "honest_custodians = {}", self.honest_custodians)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "epoch_length = {}", self.epoch_length)?;
        writeln!(f, "failsafe_timeout = {}", self.failsafe_timeout)?;
        if !self.jurisdictions.is_empty() {
            let parts: Vec<String> = self
                .jurisdictions
                .iter()
                .map(|(n, c)| format!("{n}:{c}"))
                .collect();
            writeln!(f, "jurisdictions = {}", parts.join(", "))?;
        }
        Ok(())
    }
}
