//! Run configuration: one TOML file drives every training and evaluation
//! command, so a run is reproducible from a single committed file.

use serde::{Deserialize, Serialize};
use srdiag_core::diagnosis::DiagnosisConfig;
use srdiag_core::sr_models::{DiscriminatorConfig, GeneratorConfig};
use srdiag_core::training::{GanStageConfig, PixelStageConfig};
use srdiag_core::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifest listing every image and its labels.
    pub manifest: PathBuf,
    /// Fraction of the corpus used for training; the rest is held out for
    /// evaluation.
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: "corpus/manifest.jsonl".into(),
            train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Edge the held-out images are degraded to before restoration.
    pub lr_size: usize,
    /// Sample rows in the contact sheet.
    pub previews: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            lr_size: 56,
            previews: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// One seed drives every stage; the per-section seed fields are
    /// overwritten with it when the file is loaded.
    pub seed: u64,
    /// Keeps parallel sections single-threaded unless --threads or
    /// SRDIAG_THREADS overrides.
    pub deterministic: bool,
    /// Directory receiving models, checkpoints, and history files.
    pub out_dir: PathBuf,
    /// Checkpoint interval in pixel-stage iterations or gan-stage epochs;
    /// 0 keeps only the emergency checkpoint written when a loss blows up.
    pub checkpoint_every: usize,
    /// Perceptual feature extractor: "random:<seed>" or a weights file.
    pub feature_extractor: String,
    pub data: DataSection,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub pixel_stage: PixelStageConfig,
    pub gan_stage: GanStageConfig,
    pub diagnosis: DiagnosisConfig,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: true,
            out_dir: "runs".into(),
            checkpoint_every: 0,
            feature_extractor: "random:0".into(),
            data: DataSection::default(),
            generator: GeneratorConfig::reference(),
            discriminator: DiscriminatorConfig::default(),
            pixel_stage: PixelStageConfig::default(),
            gan_stage: GanStageConfig::default(),
            diagnosis: DiagnosisConfig::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses the file, pushes the global seed into every stage section, and
    /// validates everything before any command runs.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.pixel_stage.seed = cfg.seed;
        cfg.gan_stage.seed = cfg.seed;
        cfg.diagnosis.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "data.train_fraction must be inside (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        if self.evaluation.lr_size == 0 {
            return Err(Error::config("evaluation.lr_size must be nonzero"));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.pixel_stage.validate()?;
        self.gan_stage.validate()?;
        self.diagnosis.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_reference_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.generator.blocks, 23);
        assert_eq!(cfg.pixel_stage.crop, 96);
        assert_eq!(cfg.pixel_stage.batch_size, 64);
        assert_eq!(cfg.gan_stage.crop, 192);
        assert_eq!(cfg.gan_stage.batch_size, 32);
        assert_eq!(cfg.gan_stage.weights.lambda, 5e-3);
        assert_eq!(cfg.gan_stage.weights.eta, 1e-2);
        assert_eq!(cfg.diagnosis.batch_size, 128);
        assert_eq!(cfg.evaluation.lr_size, 56);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn load_propagates_seed_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");

        std::fs::write(&p, "seed = 9\n[pixel_stage]\nseed = 4\niterations = 10\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.pixel_stage.seed, 9, "global seed wins");
        assert_eq!(cfg.gan_stage.seed, 9);
        assert_eq!(cfg.diagnosis.seed, 9);
        assert_eq!(cfg.pixel_stage.iterations, 10);

        std::fs::write(&p, "mystery = 1\n").unwrap();
        assert!(RunConfig::load(&p).is_err());

        std::fs::write(&p, "[pixel_stage]\nbatch_size = 0\n").unwrap();
        assert!(RunConfig::load(&p).is_err(), "sections are validated");

        std::fs::write(&p, "[data]\ntrain_fraction = 1.5\n").unwrap();
        assert!(RunConfig::load(&p).is_err());

        assert!(RunConfig::load(&dir.path().join("absent.toml")).is_err());
    }
}
