use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coreset::{INFER_TEMPERATURE, TRAIN_TEMPERATURE};
use crate::error::{Error, Result};
use crate::loss::{DEFAULT_CONCENTRATION, DEFAULT_MARGIN, DEFAULT_SCALE};
use crate::metric::Gamma;
use crate::model::{AblationFlags, GammaPolicy, Model, ModelConfig};
use crate::numgrad::Tensor;
use crate::simdata::{GeneratorConfig, ProtocolSpec};
use crate::train::TrainConfig;

/// Sizes of a generated verification protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_ids: usize,
    pub genuine_per_id: usize,
    pub impostor_per_id: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { n_ids: 50, genuine_per_id: 20, impostor_per_id: 200 }
    }
}

/// Every tunable of an experiment, as read from a JSON config file. Missing
/// fields take their defaults; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_c: usize,
    pub k: usize,
    pub heads: usize,
    pub gamma_init: f64,
    /// `null` trains gamma; a number freezes it at that value.
    pub gamma_fixed: Option<f64>,
    pub ablation_depth: usize,
    pub encoding_scale: f64,
    pub tau_train: f64,
    pub tau_infer: f64,
    pub s: f64,
    pub m: f64,
    pub h: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub n_min: usize,
    pub n_max: usize,
    pub train_ids: usize,
    pub templates_per_id: usize,
    pub generator: GeneratorKnobs,
    pub protocol: ProtocolConfig,
}

/// Generator settings other than width and size range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorKnobs {
    pub within_spread: f64,
    pub burst_prob: f64,
    pub burst_min: usize,
    pub burst_max: usize,
    pub jitter: f64,
    pub log_norm_mean: f64,
    pub log_norm_std: f64,
    pub frame_log_shift: f64,
    pub pose_quality_coupling: f64,
    pub burst_norm_spread: f64,
    pub burst_spread: f64,
    pub burst_coupling: f64,
    pub photometric_noise: f64,
}

impl Default for GeneratorKnobs {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            within_spread: g.within_spread,
            burst_prob: g.burst_prob,
            burst_min: g.burst_min,
            burst_max: g.burst_max,
            jitter: g.jitter,
            log_norm_mean: g.quality.log_mean,
            log_norm_std: g.quality.log_std,
            frame_log_shift: g.frame_log_shift,
            pose_quality_coupling: g.pose_quality_coupling,
            burst_norm_spread: g.burst_norm_spread,
            burst_spread: g.burst_spread,
            burst_coupling: g.burst_coupling,
            photometric_noise: g.photometric_noise,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_c: 64,
            k: 3,
            heads: 4,
            gamma_init: Gamma::DEFAULT_INIT,
            gamma_fixed: None,
            ablation_depth: 4,
            encoding_scale: crate::model::DEFAULT_ENCODING_SCALE,
            tau_train: TRAIN_TEMPERATURE,
            tau_infer: INFER_TEMPERATURE,
            s: DEFAULT_SCALE,
            m: DEFAULT_MARGIN,
            h: DEFAULT_CONCENTRATION,
            lr: 1e-4,
            weight_decay: 1e-3,
            batch: 20,
            epochs: 2,
            seed: 0,
            n_min: 1,
            n_max: 20,
            train_ids: 200,
            templates_per_id: 25,
            generator: GeneratorKnobs::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train_config().validate()?;
        self.generator_config().validate()?;
        if self.train_ids == 0 || self.templates_per_id == 0 {
            return Err(Error::Config("train_ids and templates_per_id must be >= 1".into()));
        }
        if self.protocol.n_ids < 2 {
            return Err(Error::Config("protocol needs at least 2 identities".into()));
        }
        if !self.gamma_init.is_finite() || self.gamma_fixed.is_some_and(|g| !g.is_finite()) {
            return Err(Error::Config("gamma must be finite".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.n_c, self.k).map_err(|e| Error::Config(e.to_string()))?;
        cfg.heads = self.heads;
        cfg.flags = AblationFlags::prefix(self.ablation_depth)?;
        cfg.gamma_policy = self.gamma_fixed.map_or(GammaPolicy::Trained, GammaPolicy::Fixed);
        cfg.encoding.scale = self.encoding_scale;
        cfg.infer_temperature = self.tau_infer;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Fresh model with the loss settings of this config.
    pub fn init_model(&self, prototypes: Tensor) -> Result<Model> {
        let mut model = Model::init(self.model_config()?, prototypes, self.seed)?;
        if self.gamma_fixed.is_none() {
            model.params.gamma = self.gamma_init;
        }
        let loss = &mut model.params.loss;
        loss.s = self.s;
        loss.m = self.m;
        loss.h = self.h;
        loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(model)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            temperature: self.tau_train,
            ..TrainConfig::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let g = &self.generator;
        GeneratorConfig {
            channels: self.n_c,
            within_spread: g.within_spread,
            n_min: self.n_min,
            n_max: self.n_max,
            burst_prob: g.burst_prob,
            burst_min: g.burst_min,
            burst_max: g.burst_max,
            jitter: g.jitter,
            quality: crate::simdata::QualityDist { log_mean: g.log_norm_mean, log_std: g.log_norm_std },
            frame_log_shift: g.frame_log_shift,
            pose_quality_coupling: g.pose_quality_coupling,
            burst_norm_spread: g.burst_norm_spread,
            burst_spread: g.burst_spread,
            burst_coupling: g.burst_coupling,
            photometric_noise: g.photometric_noise,
        }
    }

    pub fn protocol_spec(&self) -> ProtocolSpec {
        let p = self.protocol;
        ProtocolSpec::per_identity(p.n_ids, p.genuine_per_id, p.impostor_per_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg: RunConfig = serde_json::from_str("{\"k\": 5}").unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!((cfg.n_c, cfg.tau_train, cfg.tau_infer, cfg.s, cfg.m, cfg.h), (64, 1.0, 1e-10, 48.0, 0.8, 0.333));
        assert_eq!((cfg.n_min, cfg.n_max, cfg.epochs, cfg.batch), (1, 20, 2, 20));
        assert_eq!(RunConfig::default().k, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(serde_json::from_str::<RunConfig>("{\"kk\": 5}").is_err());
        for bad in [
            RunConfig { k: 0, ..RunConfig::default() },
            RunConfig { heads: 5, ..RunConfig::default() },
            RunConfig { n_min: 5, n_max: 2, ..RunConfig::default() },
            RunConfig { ablation_depth: 7, ..RunConfig::default() },
            RunConfig { batch: 0, ..RunConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn json_roundtrip() {
        let cfg = RunConfig { gamma_fixed: Some(10.0), ..RunConfig::default() };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
