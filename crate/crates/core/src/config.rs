//! Flat run configuration: defaults, then a TOML file, then `key=value` overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::exchange::ExchangeConfig;
use crate::losses::{ContrastiveConfig, LossWeights, PositiveSelection};
use crate::network::{Fusion, ModelConfig, TapPoints};
use crate::pipeline::TrainConfig;

/// File name the effective configuration is echoed to in every output directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub decoder_width: usize,
    pub embed_dim: usize,
    pub taps: TapPoints,
    pub channel_threshold: f64,
    pub channel_stages: BTreeSet<usize>,
    pub spatial_stages: BTreeSet<usize>,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    /// Seeds model initialization and the training stream.
    pub seed: u64,
    pub w_seg: f64,
    pub w_d1: f64,
    pub w_d2: f64,
    pub w_cl: f64,
    pub tau: f64,
    pub anchors_per_class: usize,
    pub semi_hard_fraction: f64,
    pub positives: PositiveSelection,
    /// Feature exchange during stage-2 training and fused inference.
    pub exchange: bool,
    pub fusion: Fusion,
    /// Extra `epoch_N.ckpt` every N epochs; 0 keeps only best and last.
    pub checkpoint_every: usize,
    pub data_dir: PathBuf,
    // scene generation
    pub count: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub eo_texture: f64,
    pub ir_contrast: f64,
    pub eo_noise: f64,
    pub ir_noise: f64,
    pub night_fraction: f64,
    pub night_dim: f64,
    pub night_noise: f64,
    pub train_fraction: f64,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SceneConfig::default();
        RunConfig {
            widths: m.widths,
            num_classes: m.num_classes,
            in_channels: m.in_channels,
            decoder_width: m.decoder_width,
            embed_dim: m.embed_dim,
            taps: m.taps,
            channel_threshold: m.exchange.channel_threshold,
            channel_stages: m.exchange.channel_stages,
            spatial_stages: m.exchange.spatial_stages,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            momentum: t.momentum,
            poly_power: t.poly_power,
            weight_decay: t.weight_decay,
            seed: t.seed,
            w_seg: t.weights.seg,
            w_d1: t.weights.d1,
            w_d2: t.weights.d2,
            w_cl: t.weights.cl,
            tau: t.contrastive.tau,
            anchors_per_class: t.contrastive.anchors_per_class,
            semi_hard_fraction: t.contrastive.semi_hard_fraction,
            positives: t.contrastive.positives,
            exchange: t.exchange,
            fusion: t.fusion,
            checkpoint_every: t.checkpoint_every,
            data_dir: PathBuf::from("data"),
            count: 80,
            image_size: s.size,
            min_shapes: s.min_shapes,
            max_shapes: s.max_shapes,
            eo_texture: s.eo_texture,
            ir_contrast: s.ir_contrast,
            eo_noise: s.eo_noise,
            ir_noise: s.ir_noise,
            night_fraction: s.night_fraction,
            night_dim: s.night_dim,
            night_noise: s.night_noise,
            train_fraction: s.train_fraction,
            data_seed: s.seed,
        }
    }
}

impl RunConfig {
    /// Named starting points: `desk` (the defaults) and `paper` (200 epochs).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::default()),
            "paper" => Ok(RunConfig { epochs: 200, ..RunConfig::default() }),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Applies one `key=value` override; the value is parsed as a TOML value,
    /// falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) =
            assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let mut overlay = toml::Table::new();
        overlay.insert(key.trim().to_string(), value);
        self.overlay(overlay)
    }

    /// Layers the keys of a TOML document over the current values.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        self.overlay(overlay)
    }

    fn overlay(&mut self, overlay: toml::Table) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).expect("run config is a table");
        for (key, value) in overlay {
            if !table.contains_key(&key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            table.insert(key, value);
        }
        let next: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        self.scene().validate()?;
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            widths: self.widths.clone(),
            num_classes: self.num_classes,
            in_channels: self.in_channels,
            decoder_width: self.decoder_width,
            embed_dim: self.embed_dim,
            taps: self.taps,
            exchange: ExchangeConfig {
                channel_threshold: self.channel_threshold,
                channel_stages: self.channel_stages.clone(),
                spatial_stages: self.spatial_stages.clone(),
            },
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            momentum: self.momentum,
            poly_power: self.poly_power,
            weight_decay: self.weight_decay,
            seed: self.seed,
            weights: LossWeights { seg: self.w_seg, d1: self.w_d1, d2: self.w_d2, cl: self.w_cl },
            contrastive: ContrastiveConfig {
                tau: self.tau,
                anchors_per_class: self.anchors_per_class,
                semi_hard_fraction: self.semi_hard_fraction,
                positives: self.positives,
            },
            exchange: self.exchange,
            fusion: self.fusion,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            size: self.image_size,
            num_classes: self.num_classes,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            eo_texture: self.eo_texture,
            ir_contrast: self.ir_contrast,
            eo_noise: self.eo_noise,
            ir_noise: self.ir_noise,
            night_fraction: self.night_fraction,
            night_dim: self.night_dim,
            night_noise: self.night_noise,
            train_fraction: self.train_fraction,
            seed: self.data_seed,
        }
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("epochz = 3").is_err());
        assert!(RunConfig::default().set("epochz=3").is_err());
    }

    #[test]
    fn file_then_override_precedence() {
        let mut cfg = RunConfig::preset("paper").unwrap();
        cfg.apply_toml("batch_size = 4").unwrap();
        assert_eq!(cfg.epochs, 200);
        cfg.apply_toml("epochs = 7").unwrap();
        cfg.set("epochs=9").unwrap();
        cfg.set("fusion=sum").unwrap();
        cfg.set("spatial_stages=[5]").unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.fusion), (9, 4, Fusion::Sum));
        assert_eq!(cfg.spatial_stages, [5].into_iter().collect());
        assert!(cfg.set("batch_size=1").is_err());
    }
}
