//! The pipeline configuration document (TOML) with one section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{AugmentationPolicy, SyntheticCitySpec};
use crate::error::{Error, Result};
use crate::evaluation::CountSource;
use crate::losses::LossConfig;
use crate::model::EncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Deduplication radius in meters.
    pub dedupe_eps_m: f64,
    pub augment: AugmentationPolicy,
    pub synth: SyntheticCitySpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dedupe_eps_m: 10.0,
            augment: AugmentationPolicy::default(),
            synth: SyntheticCitySpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Spatial neighbors cached per record.
    pub k: usize,
    /// Neighbor distance limit in meters.
    pub d_m: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Positives are re-augmentations of the anchor (plain contrastive clustering).
    pub cc_baseline_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 1,
            d_m: 150.0,
            batch_size: 128,
            epochs: 40,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            seed: 0,
            cc_baseline_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.d_m > 0.0) {
            return Err(Error::Config("neighbor distance must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Inverse-distance weights are zero beyond this many meters.
    pub moran_threshold_m: f64,
    /// Which labeling supplies the class shares of the weighted Moran's I.
    pub moran_counts: CountSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            moran_threshold_m: 100.0,
            moran_counts: CountSource::Evaluated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub cell_size_m: f64,
    /// Representatives listed per cluster.
    pub top_n: usize,
    /// Pixel size of one grid cell in the PNG render.
    pub png_cell_px: u32,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            cell_size_m: 100.0,
            top_n: 16,
            png_cell_px: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub map: MapConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(self.data.dedupe_eps_m >= 0.0) {
            return Err(Error::Config("dedupe radius must be non-negative".into()));
        }
        if !(self.eval.moran_threshold_m > 0.0) {
            return Err(Error::Config("Moran threshold must be positive".into()));
        }
        if !(self.map.cell_size_m > 0.0) || self.map.top_n == 0 {
            return Err(Error::Config("map cell size and top_n must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.learning_rate, 2e-4);
        assert_eq!(c.train.k, 1);
        assert_eq!(c.train.epochs, 40);
        assert_eq!(c.loss.tau_instance, 0.5);
        assert_eq!(c.loss.lambda, 2.0);
        assert_eq!(c.loss.eta, 0.2);
        assert_eq!(c.model.projection_dim, 128);
        assert_eq!(c.eval.moran_threshold_m, 100.0);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = PipelineConfig::default();
        c.train.seed = 11;
        c.model.clusters = 10;
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[train]\nbatch = 3\n").is_err());
        assert!(PipelineConfig::from_toml("[trian]\n").is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = PipelineConfig::from_toml("[model]\nclusters = 10\n[loss]\nentropy_form = \"paper\"\n").unwrap();
        assert_eq!(c.model.clusters, 10);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.loss.entropy_form, crate::losses::EntropyForm::Paper);
    }
}
