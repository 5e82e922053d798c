//! Plain-text run configuration: `key=value` lines in a file, overridden by
//! `--set key=value` pairs from the command line. The resolved settings can
//! be echoed back out as a file that reproduces the run exactly.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BlockKind, MINetConfig};
use crate::train::{LossKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidConfig(format!(
                "unknown precision {other:?} (expected f32 or f64)"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Synthetic dataset shape and haze parameter ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub pairs: usize,
    pub size: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub airlight_min: f64,
    pub airlight_max: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            pairs: 8,
            size: 32,
            beta_min: 0.4,
            beta_max: 1.6,
            airlight_min: 0.7,
            airlight_max: 1.0,
        }
    }
}

/// Everything a run needs: model architecture, training loop knobs, data
/// generation, and arithmetic precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub model: MINetConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub precision: Precision,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            model: MINetConfig::default(),
            train: TrainConfig::default(),
            data: DataSettings::default(),
            precision: Precision::F64,
        }
    }
}

fn split_kv(line: &str) -> Result<(&str, &str)> {
    line.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {line:?}")))
}

impl RunSettings {
    /// Applies one assignment; returns false when the key is unknown so the
    /// caller can batch-report all unknown keys at once.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::InvalidConfig(format!("bad {key} value {value:?}"));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let parse_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad());
        let parse_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad()),
        };
        let parse_triple = |v: &str| -> Result<[usize; 3]> {
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let mut out = [0usize; 3];
            for (o, p) in out.iter_mut().zip(&parts) {
                *o = p.trim().parse().map_err(|_| bad())?;
            }
            Ok(out)
        };
        match key {
            "trunk_channels" => self.model.trunk_channels = parse_usize(value)?,
            "dilations" => self.model.dilations = parse_triple(value)?,
            "recursions" => self.model.recursions = parse_triple(value)?,
            "eta" => self.model.eta = parse_f64(value)?,
            "rca_reduction" => self.model.rca_reduction = parse_usize(value)?,
            "downsample" => self.model.downsample = parse_bool(value)?,
            "block_kind" => self.model.block_kind = BlockKind::parse(value)?,
            "use_mlf" => self.model.use_mlf = parse_bool(value)?,
            "use_rca" => self.model.use_rca = parse_bool(value)?,
            "mlf_softmax" => self.model.mlf_softmax = parse_bool(value)?,
            "iters" => self.train.iters = parse_usize(value)?,
            "batch_size" => self.train.batch_size = parse_usize(value)?,
            "loss" => self.train.loss = LossKind::parse(value)?,
            "base_lr" => self.train.schedule.base_lr = parse_f64(value)?,
            "lr_decay" => self.train.schedule.decay = parse_f64(value)?,
            "lr_interval" => self.train.schedule.interval = parse_usize(value)?,
            "seed" => self.train.seed = parse_u64(value)?,
            "log_every" => self.train.log_every = parse_usize(value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_usize(value)?,
            "pairs" => self.data.pairs = parse_usize(value)?,
            "size" => self.data.size = parse_usize(value)?,
            "beta_min" => self.data.beta_min = parse_f64(value)?,
            "beta_max" => self.data.beta_max = parse_f64(value)?,
            "airlight_min" => self.data.airlight_min = parse_f64(value)?,
            "airlight_max" => self.data.airlight_max = parse_f64(value)?,
            "precision" => self.precision = Precision::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Defaults, then file assignments, then override pairs, in that order.
    /// Unknown keys from either source are collected into one error.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunSettings> {
        let mut settings = RunSettings::default();
        let mut unknown = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = split_kv(line)?;
                if !settings.apply(k, v)? {
                    unknown.push(k.to_string());
                }
            }
        }
        for pair in overrides {
            let (k, v) = split_kv(pair)?;
            if !settings.apply(k, v)? {
                unknown.push(k.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownConfigKeys(unknown.join(", ")));
        }
        settings.model.validate()?;
        settings.train.schedule.validate()?;
        Ok(settings)
    }

    /// Full snapshot; feeding it back through [`RunSettings::resolve`]
    /// reproduces this value exactly.
    pub fn to_text(&self) -> String {
        let mut out = self.model.to_text();
        out.push_str(&format!(
            "iters={}\nbatch_size={}\nloss={}\nbase_lr={}\nlr_decay={}\nlr_interval={}\n\
             seed={}\nlog_every={}\ncheckpoint_every={}\n",
            self.train.iters,
            self.train.batch_size,
            self.train.loss.as_str(),
            self.train.schedule.base_lr,
            self.train.schedule.decay,
            self.train.schedule.interval,
            self.train.seed,
            self.train.log_every,
            self.train.checkpoint_every,
        ));
        out.push_str(&format!(
            "pairs={}\nsize={}\nbeta_min={}\nbeta_max={}\nairlight_min={}\nairlight_max={}\n\
             precision={}\n",
            self.data.pairs,
            self.data.size,
            self.data.beta_min,
            self.data.beta_max,
            self.data.airlight_min,
            self.data.airlight_max,
            self.precision,
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "trunk_channels=16\niters=100\n# comment\n\nseed=3\n").unwrap();
        let settings = RunSettings::resolve(
            Some(&path),
            &["iters=250".to_string(), "precision=f32".to_string()],
        )
        .unwrap();
        assert_eq!(settings.model.trunk_channels, 16);
        assert_eq!(settings.train.iters, 250);
        assert_eq!(settings.train.seed, 3);
        assert_eq!(settings.precision, Precision::F32);
    }

    #[test]
    fn unknown_keys_are_listed_together() {
        match RunSettings::resolve(None, &["bogus=1".into(), "iters=5".into(), "nope=2".into()]) {
            Err(Error::UnknownConfigKeys(keys)) => {
                assert!(keys.contains("bogus") && keys.contains("nope"));
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunSettings::resolve(None, &["iters=abc".into()]).is_err());
        assert!(RunSettings::resolve(None, &["dilations=1,2".into()]).is_err());
        assert!(RunSettings::resolve(None, &["no-equals-sign".into()]).is_err());
        // model invariants run after resolution
        assert!(RunSettings::resolve(None, &["dilations=2,4,6".into()]).is_err());
    }

    #[test]
    fn echo_roundtrip_reproduces_settings() {
        let settings = RunSettings::resolve(
            None,
            &[
                "trunk_channels=24".into(),
                "recursions=4,4,4".into(),
                "rca_reduction=8".into(),
                "loss=l1".into(),
                "beta_max=1.25".into(),
                "seed=42".into(),
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.cfg");
        fs::write(&path, settings.to_text()).unwrap();
        let replay = RunSettings::resolve(Some(&path), &[]).unwrap();
        assert_eq!(replay, settings);
    }
}
