use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Phase;
use crate::error::{ensure, Result};
use crate::losses::{FeatureExtractor, LossConfig};
use crate::network::Variant;
use crate::semantics::ClassId;

/// Where UMSN training takes its semantic masks from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masks stored with each sample serve as both input and loss masks.
    #[default]
    Stored,
    /// Segmentation network predictions: soft masks of the blurry image as
    /// input, hardened masks of the clean image for the loss.
    Snet,
}

/// Learning-rate schedule over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last iteration.
    Cosine,
}

impl Default for Variant {
    fn default() -> Self {
        Variant::Umsn
    }
}

fn default_batch() -> usize {
    16
}

fn default_width() -> f64 {
    1.0
}

fn default_log_every() -> u64 {
    1
}

/// One training run. Learning rate and iteration count fall back to the
/// per-phase defaults when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Periodic checkpoint interval; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub masks: MaskMode,
    /// External feature-extractor weights; otherwise a seeded random stack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<PathBuf>,
    #[serde(default)]
    pub extractor_seed: u64,
    /// First-stage checkpoints for classes 1..=4, used to initialise UMSN streams.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage1_checkpoints: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snet_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            class_index: None,
            learning_rate: None,
            iterations: None,
            lr_schedule: LrSchedule::Constant,
            batch_size: default_batch(),
            master_seed: 0,
            width_multiplier: default_width(),
            loss: LossConfig::default(),
            checkpoint_every: 0,
            log_every: default_log_every(),
            dataset: None,
            variant: Variant::default(),
            masks: MaskMode::default(),
            extractor: None,
            extractor_seed: 0,
            stage1_checkpoints: Vec::new(),
            snet_checkpoint: None,
        }
    }

    pub fn default_learning_rate(phase: Phase) -> f64 {
        match phase {
            Phase::SnetFinetune => 1e-5,
            Phase::Snet | Phase::Stage1 | Phase::Umsn => 2e-4,
        }
    }

    pub fn default_iterations(phase: Phase) -> u64 {
        match phase {
            Phase::Snet => 60_000,
            Phase::SnetFinetune => 30_000,
            Phase::Stage1 => 50_000,
            Phase::Umsn => 100_000,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| Self::default_learning_rate(self.phase))
    }

    /// Rate used for update `it` (1-based).
    pub fn learning_rate_at(&self, it: u64) -> f64 {
        let base = self.learning_rate();
        match self.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = (it.saturating_sub(1)) as f64 / self.iterations() as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
            .unwrap_or_else(|| Self::default_iterations(self.phase))
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        ensure!(lr > 0.0 && lr.is_finite(), "learning rate must be positive, got {lr}");
        ensure!(self.iterations() >= 1, "iterations must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.log_every >= 1, "log_every must be at least 1");
        ensure!(
            self.width_multiplier > 0.0 && self.width_multiplier.is_finite(),
            "width multiplier must be positive"
        );
        self.loss.validate()?;
        if self.phase == Phase::Stage1 {
            ensure!(self.class_index.is_some(), "first-stage training needs class_index");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn feature_extractor(&self) -> Result<FeatureExtractor> {
        match &self.extractor {
            Some(path) => FeatureExtractor::load(path),
            None => Ok(FeatureExtractor::seeded(self.extractor_seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_defaults() {
        let c = TrainConfig::new(Phase::SnetFinetune);
        assert_eq!(c.learning_rate(), 1e-5);
        assert_eq!(c.iterations(), 30_000);
        assert_eq!(TrainConfig::new(Phase::Umsn).iterations(), 100_000);
        assert_eq!(TrainConfig::new(Phase::Stage1).learning_rate(), 2e-4);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.learning_rate_at(12345), 1e-5);
    }

    #[test]
    fn cosine_schedule_decays() {
        let mut c = TrainConfig::new(Phase::Umsn);
        c.iterations = Some(100);
        c.lr_schedule = LrSchedule::Cosine;
        assert_eq!(c.learning_rate_at(1), 2e-4);
        assert!((c.learning_rate_at(51) - 1e-4).abs() < 1e-12);
        assert!(c.learning_rate_at(100) < 1e-6);
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::new(Phase::Stage1);
        assert!(c.validate().is_err());
        c.class_index = Some(ClassId::new(2).unwrap());
        assert!(c.validate().is_ok());
        c.iterations = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let mut c = TrainConfig::new(Phase::Umsn);
        c.iterations = Some(5);
        let s = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let minimal: TrainConfig = serde_json::from_str(r#"{"phase": "snet"}"#).unwrap();
        assert_eq!(minimal, TrainConfig::new(Phase::Snet));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"phase": "snet", "bogus": 1}"#).is_err());
    }
}
