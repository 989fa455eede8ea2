use serde::{Deserialize, Serialize};

use super::LoopError;
use crate::detector::DetectorKind;
use crate::eval::EvalParams;
use crate::refdetect::{AugmentSet, RefDetectorParams};

/// Hyperparameters of one self-learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Minimum confidence for promoting a detection (inclusive).
    pub threshold: f64,
    /// Training epochs per iteration.
    pub epochs: u32,
    /// Self-learning iterations after the bootstrap round.
    pub iterations: u32,
    pub batch_size: u32,
    pub steps_per_epoch: u32,
    pub nms_iou: f64,
    pub eval_iou: f64,
    pub max_dets_per_image: usize,
    /// Seeds above `i64::MAX` are written as decimal strings, which TOML
    /// integers cannot hold.
    #[serde(with = "seed_repr")]
    pub seed: u64,
    /// `builtin` or `external:<command line>`.
    pub detector: String,
    pub keep_bootstrap_annotations: bool,
    /// Reinitialize the detector before every training round.
    pub cold_restart: bool,
    pub augment: bool,
    /// Record wall-clock time in `metrics.csv`; off keeps runs byte-identical.
    pub record_timing: bool,
    /// Reference detector: foreground pixel score threshold.
    pub pixel_threshold: f64,
    /// Reference detector: smallest component kept, in pixels.
    pub min_area: u64,
    /// Reference detector: divisor of the log-likelihood ratio.
    pub score_temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            epochs: 100,
            iterations: 15,
            batch_size: 2,
            steps_per_epoch: 24,
            nms_iou: 0.5,
            eval_iou: 0.75,
            max_dets_per_image: 100,
            seed: 0,
            detector: "builtin".into(),
            keep_bootstrap_annotations: true,
            cold_restart: false,
            augment: true,
            record_timing: false,
            pixel_threshold: 0.5,
            min_area: 30,
            score_temperature: 5.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |msg: String| Err(LoopError::Config(msg));
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return bad("batch_size and steps_per_epoch must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return bad("nms_iou must lie in [0, 1] and eval_iou in (0, 1]".into());
        }
        if self.max_dets_per_image == 0 {
            return bad("max_dets_per_image must be at least 1".into());
        }
        self.detector_kind()?;
        self.detector_params()
            .validate()
            .map_err(|e| LoopError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn detector_kind(&self) -> Result<DetectorKind, LoopError> {
        self.detector.parse().map_err(LoopError::Config)
    }

    pub fn detector_params(&self) -> RefDetectorParams {
        RefDetectorParams {
            pixel_threshold: self.pixel_threshold,
            min_area: self.min_area,
            connectivity: 8,
            augment: AugmentSet::default(),
            temperature: self.score_temperature,
        }
    }

    pub fn eval_params(&self) -> EvalParams {
        EvalParams {
            eval_iou: self.eval_iou,
            nms_iou: self.nms_iou,
            max_dets_per_image: self.max_dets_per_image,
        }
    }

    /// Names accepted by [`RunConfig::set`] and config files.
    pub fn keys() -> Vec<String> {
        toml::Table::try_from(Self::default())
            .expect("config serializes")
            .keys()
            .cloned()
            .collect()
    }

    /// Applies a `key=value` override, parsing the value as TOML.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), LoopError> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| LoopError::Config(e.to_string()))?;
        if !table.contains_key(key) {
            return Err(LoopError::Config(format!("unknown config key `{key}`")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| LoopError::Config(format!("`{key}={value}`: {}", e.message())))?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, LoopError> {
        toml::from_str(text).map_err(|e| LoopError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

mod seed_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        if *seed <= i64::MAX as u64 {
            s.serialize_u64(*seed)
        } else {
            s.serialize_str(&seed.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(u64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(v),
            Repr::Str(s) => s.trim().parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_values() {
        let mut c = RunConfig::default();
        c.set("threshold", "0.75").unwrap();
        c.set("epochs", "4").unwrap();
        c.set("detector", "external:python3 a.py").unwrap();
        c.set("cold_restart", "true").unwrap();
        assert_eq!(c.threshold, 0.75);
        assert_eq!(c.epochs, 4);
        assert_eq!(c.detector, "external:python3 a.py");
        assert!(c.cold_restart);
        assert!(c.set("nonsense", "1").is_err());
        assert!(RunConfig::keys().iter().any(|k| k == "score_temperature"));
        assert!(c.set("epochs", "many").is_err());
    }

    #[test]
    fn full_range_seeds_roundtrip() {
        for seed in [0, i64::MAX as u64, i64::MAX as u64 + 1, u64::MAX] {
            let c = RunConfig {
                seed,
                ..Default::default()
            };
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
            let mut d = RunConfig::default();
            d.set("seed", &seed.to_string()).unwrap();
            assert_eq!(d.seed, seed);
        }
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = RunConfig {
            threshold: 0.5,
            ..Default::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("epochs = 7\n").unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.threshold, 0.25);
        assert!(RunConfig::from_toml("epoch = 7\n").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            RunConfig {
                threshold: 1.5,
                ..Default::default()
            },
            RunConfig {
                epochs: 0,
                ..Default::default()
            },
            RunConfig {
                detector: "gpu".into(),
                ..Default::default()
            },
            RunConfig {
                min_area: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
