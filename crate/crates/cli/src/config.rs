//! Merged run configuration: defaults, then `--config` file, then flags.
//! The merged value is echoed as `config.json` into each output directory
//! and can be fed back through `--config` to reproduce a run.

use std::path::{Path, PathBuf};

use anyhow::Context;
use attrib_reid::backbone::{BackboneConfig, StageSpec};
use attrib_reid::data::{SplitConfig, SyntheticSpec};
use attrib_reid::evaluation::{Direction, GalleryMode};
use attrib_reid::losses::{LambdaVariant, LossConfig};
use attrib_reid::ops::{ActivationParams, DEFAULT_GEM_P};
use attrib_reid::optim::OptimizerKind;
use attrib_reid::training::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub ids: usize,
    pub images_per_platform: usize,
    pub noise: f64,
    pub train_fraction: f64,
    pub queries_per_platform: usize,
    pub stage_channels: Vec<usize>,
    pub shared_stages: usize,
    pub gem_p: f64,
    pub activation_k: f64,
    pub activation_t: f64,
    pub phase: Phase,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ids_per_batch: usize,
    pub pairs_per_batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub v: f64,
    pub margin: f64,
    pub lambda_variant: LambdaVariant,
    pub direction: Direction,
    pub gallery_mode: GalleryMode,
    pub oracle: bool,
    pub query: Option<String>,
    pub gallery: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let split = SplitConfig::default();
        let train = TrainConfig::default();
        let loss = LossConfig::default();
        let act = ActivationParams::default();
        let backbone = BackboneConfig::default();
        RunConfig {
            command: String::new(),
            data: None,
            run: None,
            out: None,
            seed: 0,
            threads: None,
            height: synth.height,
            width: synth.width,
            ids: synth.identities,
            images_per_platform: synth.images_per_platform,
            noise: synth.noise,
            train_fraction: split.train_fraction,
            queries_per_platform: split.queries_per_platform,
            stage_channels: backbone.stages.iter().map(|s| s.out_channels).collect(),
            shared_stages: backbone.shared_stage_count,
            gem_p: DEFAULT_GEM_P,
            activation_k: act.k(),
            activation_t: act.t(),
            phase: train.phase,
            optimizer: train.optimizer,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            ids_per_batch: train.ids_per_batch,
            pairs_per_batch: train.pairs_per_batch,
            alpha: loss.alpha,
            beta: loss.beta,
            v: loss.v,
            margin: loss.margin,
            lambda_variant: loss.lambda_variant,
            direction: Direction::AerialToGround,
            gallery_mode: GalleryMode::Cross,
            oracle: false,
            query: None,
            gallery: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Writes the echo into `dir`, creating it if needed.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(CONFIG_ECHO), text)?;
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            identities: self.ids,
            images_per_platform: self.images_per_platform,
            height: self.height,
            width: self.width,
            noise: self.noise,
            seed: self.seed,
            ..SyntheticSpec::default()
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            train_fraction: self.train_fraction,
            queries_per_platform: self.queries_per_platform,
            seed: self.seed,
        }
    }

    pub fn backbone_config(&self, id_count: usize) -> BackboneConfig {
        let stages = self
            .stage_channels
            .iter()
            .map(|&c| StageSpec { out_channels: c, stride: 2 })
            .collect();
        let mut cfg = BackboneConfig::new(stages, (3, self.height, self.width), id_count, self.seed);
        cfg.shared_stage_count = self.shared_stages;
        cfg
    }

    pub fn activation(&self) -> attrib_reid::Result<ActivationParams> {
        ActivationParams::new(self.activation_k, self.activation_t)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            phase: self.phase,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            ids_per_batch: self.ids_per_batch,
            pairs_per_batch: self.pairs_per_batch,
            gem_p: self.gem_p,
            loss: LossConfig {
                alpha: self.alpha,
                beta: self.beta,
                v: self.v,
                margin: self.margin,
                lambda_variant: self.lambda_variant,
            },
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            command: "train".into(),
            alpha: 0.0,
            lambda_variant: LambdaVariant::Balanced,
            data: Some("d".into()),
            ..RunConfig::default()
        };
        cfg.echo(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join(CONFIG_ECHO)).unwrap(), cfg);
    }

    #[test]
    fn defaults_match_library() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.backbone_config(10), BackboneConfig { seed: 0, ..BackboneConfig::default() });
        assert!(cfg.synthetic_spec().validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"alhpa": 1.0}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
