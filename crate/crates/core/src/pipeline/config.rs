use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eend_ola::EendOlaConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::simulator::SimConfig;
use crate::soap::SoapConfig;

/// One stage-1 training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    /// Weight of the attractor existence loss.
    pub alpha: f64,
    /// Recordings are cut into chunks of at most this length.
    pub max_seq_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub stage1_phases: Vec<Phase>,
    pub stage2_epochs: usize,
    pub stage2_max_seq_seconds: f64,
    /// Fraction of stage-2 epochs during which the frame encoder stays frozen.
    pub freeze_fraction: f64,
    pub profile_epochs: usize,
    pub profile_crop_seconds: f64,
    pub profile_lr: f64,
    /// Share of each speaker's crops held out when training the extractor.
    pub profile_holdout: f64,
    /// The last `average_last` epoch checkpoints are averaged into the final one.
    pub average_last: usize,
    /// Compute train-set DER after every stage-1 epoch.
    pub eval_der: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            clip_norm: 5.0,
            stage1_phases: vec![
                Phase {
                    epochs: 20,
                    alpha: 1.0,
                    max_seq_seconds: 50.0,
                },
                Phase {
                    epochs: 1,
                    alpha: 0.01,
                    max_seq_seconds: 200.0,
                },
            ],
            stage2_epochs: 10,
            stage2_max_seq_seconds: 16.0,
            freeze_fraction: 0.5,
            profile_epochs: 10,
            profile_crop_seconds: 2.0,
            profile_lr: 1e-3,
            profile_holdout: 0.2,
            average_last: 1,
            eval_der: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    /// Stored feature matrices (the simulator's default output).
    #[default]
    Features,
    /// Log-mel features computed from each row's WAV file.
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub min_dur: f64,
    pub merge_gap: f64,
    pub collar: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            min_dur: 0.0,
            merge_gap: 0.0,
            collar: crate::metrics::DEFAULT_COLLAR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub features: FeatureConfig,
    pub eend_ola: EendOlaConfig,
    pub soap: SoapConfig,
    pub sim: SimConfig,
    pub trainer: TrainerConfig,
    pub postprocess: PostprocessConfig,
    pub input: InputSource,
    pub n_refine_iters: usize,
    /// Stop refining once an iteration changes no frame.
    pub stop_when_unchanged: bool,
    pub profile_min_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            eend_ola: EendOlaConfig::default(),
            soap: SoapConfig::default(),
            sim: SimConfig::default(),
            trainer: TrainerConfig::default(),
            postprocess: PostprocessConfig::default(),
            input: InputSource::Features,
            n_refine_iters: 2,
            stop_when_unchanged: false,
            profile_min_frames: 25,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.eend_ola.validate()?;
        self.soap.validate()?;
        self.sim.validate()?;
        let dim = self.features.output_dim();
        if self.eend_ola.input_dim != dim || self.soap.input_dim != dim {
            return Err(Error::Config(format!(
                "model input dims ({}, {}) must equal the stacked feature dim {dim}",
                self.eend_ola.input_dim, self.soap.input_dim
            )));
        }
        if self.input == InputSource::Features && self.sim.feature_dim != self.features.n_mels {
            return Err(Error::Config(format!(
                "simulated feature dim {} differs from n_mels {}",
                self.sim.feature_dim, self.features.n_mels
            )));
        }
        if self.eend_ola.s_max != self.soap.s_max || self.eend_ola.k_max != self.soap.k_max {
            return Err(Error::Config("stage-1 and stage-2 codebooks differ".into()));
        }
        let t = &self.trainer;
        if t.batch_size == 0 || !(t.lr > 0.0) || !(t.clip_norm > 0.0) || t.average_last == 0 {
            return Err(Error::Config("batch_size, lr, clip_norm and average_last must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.freeze_fraction) || !(0.0..1.0).contains(&t.profile_holdout) {
            return Err(Error::Config("freeze_fraction must lie in [0,1] and profile_holdout in [0,1)".into()));
        }
        if t.stage1_phases.iter().any(|p| !(p.max_seq_seconds > 0.0) || p.alpha < 0.0) {
            return Err(Error::Config("phases need positive max_seq_seconds and alpha >= 0".into()));
        }
        Ok(())
    }

    /// Parses TOML text, applies `key.path=value` overrides, and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let cfg: Self = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every seed-bearing field from one master seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.trainer.seed = seed;
        self.sim.seed = seed;
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_refine_iters, 2);
        assert_eq!(cfg.trainer.clip_norm, 5.0);
        assert_eq!(cfg.trainer.stage1_phases[1].alpha, 0.01);
        let back = PipelineConfig::from_toml_with_overrides(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_by_path() {
        let cfg = PipelineConfig::from_toml_with_overrides(
            "[trainer]\nbatch_size = 4\n",
            &[
                "trainer.lr=0.01".into(),
                "sim.n_speakers_range=[1,2]".into(),
                "n_refine_iters=0".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.trainer.batch_size, 4);
        assert_eq!(cfg.trainer.lr, 0.01);
        assert_eq!(cfg.sim.n_speakers_range, [1, 2]);
        assert_eq!(cfg.n_refine_iters, 0);
        assert!(PipelineConfig::from_toml_with_overrides("", &["trainer.lr".into()]).is_err());
        assert!(PipelineConfig::from_toml_with_overrides("", &["trainer.nonsense=1".into()]).is_err());
        assert!(PipelineConfig::from_toml_with_overrides("", &["eend_ola.input_dim=10".into()]).is_err());
    }
}
