//! Experiment configuration file.
//!
//! A TOML document with top-level `seed` and `output_dir` and the sections
//! `[data]`, `[encoder]`, `[training]`, `[guided]` and `[contrastive]`.
//! Every key is optional; unknown keys are rejected. Relative paths are
//! resolved against the config file's directory.
//!
//! Defaults:
//!
//! | key | default |
//! |---|---|
//! | `seed` | 0 |
//! | `data.source`, `data.target` | empty manifest lists |
//! | `data.domains` | empty (report falls back to source and target) |
//! | `data.label_map` | none |
//! | `data.synthetic` | 3 classes, 100 per class, 32 px, a/b offset 8, jitter 2, blur 1, speckle 0.08, class tint 8 |
//! | `encoder` | 32 px input, conv blocks 8/16/32 (3x3, stride 2), embedding 32 |
//! | `training` | naive, 10 epochs, batch 32, lr 0.05, train fraction 1, blur 1, eval every epoch |
//! | `guided` | K = 2, beta1 = beta2 = 0.5, inner lr 0.05, calibration fraction 0.15 |
//! | `contrastive` | tau 0.1, 4 views, 20 epochs, lr 0.01, excluded-positive denominator |

use std::path::{Path, PathBuf};

use metadomain::evaluation::SyntheticConfig;
use metadomain::losses::GuidedLossConfig;
use metadomain::meta_domain::DEFAULT_CALIBRATION_FRACTION;
use metadomain::model::EncoderConfig;
use metadomain::training::{Regime, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub encoder: EncoderConfig,
    pub training: TrainingSection,
    pub guided: GuidedSection,
    pub contrastive: ContrastiveSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifests of the source domain (the only domain for `train`,
    /// `pretrain`, `calibrate` and `evaluate`).
    pub source: Vec<PathBuf>,
    /// Manifests of the adaptation target.
    pub target: Vec<PathBuf>,
    /// Domains evaluated by `report`, one manifest list each.
    pub domains: Vec<Vec<PathBuf>>,
    /// JSON object mapping target class names to source class names.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_map: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the trained-on domain's training split that is kept.
    pub train_fraction: f64,
    pub augment_blur_sigma: f64,
    pub adapt_source_per_batch: usize,
    pub eval_every_epoch: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            regime: t.regime,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            train_fraction: 1.0,
            augment_blur_sigma: t.augment_blur_sigma,
            adapt_source_per_batch: t.adapt_source_per_batch,
            eval_every_epoch: t.eval_every_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidedSection {
    pub k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub inner_lr: f64,
    pub calibration_fraction: f64,
}

impl Default for GuidedSection {
    fn default() -> Self {
        let g = GuidedLossConfig::default();
        Self {
            k: g.k,
            beta1: g.beta1,
            beta2: g.beta2,
            inner_lr: g.inner_lr,
            calibration_fraction: DEFAULT_CALIBRATION_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveSection {
    pub temperature: f64,
    pub n_views: usize,
    pub standard_denominator: bool,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            temperature: t.temperature,
            n_views: t.n_views,
            standard_denominator: t.standard_denominator,
            epochs: 20,
            learning_rate: 0.01,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::MissingInput { path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text, path)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.source.iter_mut().for_each(fix);
        self.data.target.iter_mut().for_each(fix);
        self.data.domains.iter_mut().flatten().for_each(fix);
        self.data.label_map.iter_mut().for_each(fix);
        self.output_dir.iter_mut().for_each(fix);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::usage(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| metadomain::Error::Io { path, source: e })?;
        Ok(())
    }

    pub fn guided_loss(&self) -> GuidedLossConfig {
        GuidedLossConfig {
            beta1: self.guided.beta1,
            beta2: self.guided.beta2,
            k: self.guided.k,
            inner_lr: self.guided.inner_lr,
        }
    }

    /// Training configuration for `regime`. Contrastive pre-training takes
    /// its epochs and learning rate from `[contrastive]`.
    pub fn train_config(&self, regime: Regime) -> TrainConfig {
        let t = &self.training;
        let c = &self.contrastive;
        let (epochs, learning_rate) = match regime {
            Regime::CtPretrain => (c.epochs, c.learning_rate),
            _ => (t.epochs, t.learning_rate),
        };
        TrainConfig {
            regime,
            epochs,
            batch_size: t.batch_size,
            learning_rate,
            seed: self.seed,
            n_views: c.n_views,
            temperature: c.temperature,
            standard_denominator: c.standard_denominator,
            calibration_fraction: self.guided.calibration_fraction,
            guided: self.guided_loss(),
            adapt_source_per_batch: t.adapt_source_per_batch,
            augment_blur_sigma: t.augment_blur_sigma,
            eval_every_epoch: t.eval_every_epoch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, Path::new("x.toml")).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml("[training]\nepoch = 3\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        assert!(ExperimentConfig::from_toml("colour = 1\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let cfg = ExperimentConfig::from_toml(
            "[data]\nsource = [\"a.csv\", \"/abs/b.csv\"]\n",
            Path::new("/cfg/dir/exp.toml"),
        )
        .unwrap();
        assert_eq!(cfg.data.source, [PathBuf::from("/cfg/dir/a.csv"), PathBuf::from("/abs/b.csv")]);
    }

    #[test]
    fn pretrain_uses_contrastive_schedule() {
        let cfg = ExperimentConfig::default();
        let ct = cfg.train_config(Regime::CtPretrain);
        assert_eq!((ct.epochs, ct.learning_rate), (20, 0.01));
        let sup = cfg.train_config(Regime::Naive);
        assert_eq!((sup.epochs, sup.learning_rate), (10, 0.05));
        assert!(ct.validate().is_ok() && sup.validate().is_ok());
    }
}
