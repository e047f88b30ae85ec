//! The JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use replica_core::autoencoder::AEConfig;
use replica_core::data::{DatasetSpec, PhantomConfig};
use replica_core::detector::DetectorConfig;
use replica_core::translator::{LambdaSchedule, MaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "REPLICA_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, autoencoder init, pairing and detector training.
    pub seed: u64,
    /// Relative to the config file.
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub autoencoder: AeSection,
    pub translate: TranslateSection,
    pub detector: DetectorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            autoencoder: AeSection::default(),
            translate: TranslateSection::default(),
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_normal: usize,
    pub n_tumor: usize,
    /// Fractions for (train, val, test).
    pub splits: (f64, f64, f64),
    pub height: usize,
    pub width: usize,
    pub tumor_radius: (f64, f64),
    pub contrast: (f64, f64),
    pub texture_amplitude: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        DataSection {
            n_normal: 100,
            n_tumor: 150,
            splits: (0.8, 0.2, 0.0),
            height: 160,
            width: 128,
            tumor_radius: p.tumor_radius,
            contrast: p.contrast,
            texture_amplitude: p.texture_amplitude,
        }
    }
}

impl DataSection {
    pub fn spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_normal: self.n_normal,
            n_tumor: self.n_tumor,
            splits: self.splits,
            phantom: PhantomConfig {
                height: self.height,
                width: self.width,
                tumor: false,
                tumor_radius: self.tumor_radius,
                contrast: self.contrast,
                texture_amplitude: self.texture_amplitude,
                seed: 0,
            },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeSection {
    /// Training images, taken half from the train-split tumors and half from the normals.
    pub train_images: usize,
    pub model: AEConfig,
}

impl Default for AeSection {
    fn default() -> Self {
        AeSection {
            train_images: 8,
            model: AEConfig {
                encoder_channels: vec![16, 32, 64],
                decoder_channels: vec![32, 16],
                optimizer: replica_core::tensor::OptimizerConfig::Adam { lr: 2e-3 },
                ..AEConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslateSection {
    pub lambda_max: f64,
    /// Translated images made from each train-split tumor, each with a different normal.
    pub per_tumor: usize,
    /// Band sizes; one eighth of the shorter image side when absent.
    pub mask: Option<MaskSpec>,
}

impl Default for TranslateSection {
    fn default() -> Self {
        TranslateSection {
            lambda_max: 0.6,
            per_tumor: 2,
            mask: None,
        }
    }
}

impl TranslateSection {
    pub fn mask_for(&self, height: usize, width: usize) -> MaskSpec {
        self.mask
            .unwrap_or_else(|| MaskSpec::for_side(height.min(width)))
    }
}

impl RunConfig {
    /// Parses `path` and resolves `output_dir` against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        self.data
            .spec(self.seed)
            .phantom
            .validate()
            .map_err(|e| CliError::Config(format!("data: {e}")))?;
        if d.height != self.detector.input_height || d.width != self.detector.input_width {
            return Err(CliError::Config(format!(
                "data images are {}x{} but the detector expects {}x{}",
                d.height, d.width, self.detector.input_height, self.detector.input_width
            )));
        }
        let mut det = self.detector.clone();
        det.seed = self.seed;
        det.validate()
            .map_err(|e| CliError::Config(format!("detector: {e}")))?;
        self.autoencoder
            .model
            .validate()
            .map_err(|e| CliError::Config(format!("autoencoder: {e}")))?;
        if self.autoencoder.train_images == 0 {
            return Err(CliError::Config(
                "autoencoder.train_images must be positive".into(),
            ));
        }
        let m = self.autoencoder.model.required_multiple();
        if !d.height.is_multiple_of(m) || !d.width.is_multiple_of(m) {
            return Err(CliError::Config(format!(
                "autoencoder needs image sides divisible by {m}, got {}x{}",
                d.height, d.width
            )));
        }
        self.schedule()?;
        if self.translate.per_tumor == 0 {
            return Err(CliError::Config(
                "translate.per_tumor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LambdaSchedule, CliError> {
        LambdaSchedule::linear(
            self.translate.lambda_max,
            replica_core::autoencoder::NUM_LAYERS,
        )
        .map_err(|e| CliError::Config(format!("translate: {e}")))
    }

    /// The detector section with the run seed applied.
    pub fn detector_config(&self, seed: u64) -> DetectorConfig {
        DetectorConfig {
            seed,
            ..self.detector.clone()
        }
    }
}
