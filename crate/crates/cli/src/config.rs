use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use lvseg_core::dataset::PhantomSpec;
use lvseg_core::metrics::EvalRegion;
use lvseg_core::pipeline::{FcnConfig, PreprocessConfig};
use lvseg_core::postproc::PostprocConfig;
use lvseg_core::roi::RoiConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub phantom: PhantomSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Fraction of sequences used for training; the rest are inferred and
    /// scored. `null` trains and scores on every sequence.
    pub train_frac: Option<f64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_frac: Some(0.8) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub region: EvalRegion,
}

/// Every knob of the pipeline. Missing keys take the module defaults and
/// unknown keys are rejected.
///
/// `seed` drives corpus synthesis, the train/test split and training; it
/// replaces `fcn.train.seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub roi: RoiConfig,
    pub fcn: FcnConfig,
    pub postproc: PostprocConfig,
    pub metrics: MetricsConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies command-line overrides, then validates.
    pub fn finish(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.fcn.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.preprocess.clip_fraction > 0.0 && self.preprocess.clip_fraction < 1.0) {
            anyhow::bail!("preprocess.clipFraction must lie in (0, 1)");
        }
        if let Some(f) = self.split.train_frac {
            if !(f > 0.0 && f < 1.0) {
                anyhow::bail!("split.trainFrac must lie in (0, 1)");
            }
        }
        self.roi.validate().context("roi")?;
        self.fcn.validate().context("fcn")?;
        self.postproc.validate().context("postproc")?;
        self.synth.phantom.validate().context("synth.phantom")?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 3, "fcn": {"train": {"epochs": 2}}}"#).unwrap();
        let cfg = cfg.finish(None).unwrap();
        assert_eq!(cfg.fcn.train.epochs, 2);
        assert_eq!(cfg.fcn.train.seed, 3);
        assert_eq!(cfg.roi, RoiConfig::default());
        assert_eq!(cfg.preprocess.clip_fraction, 0.01);
        assert_eq!(cfg.clone().finish(Some(9)).unwrap().fcn.train.seed, 9);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"roi": {"gridSise": 3}}"#).is_err());
        let cfg: PipelineConfig = serde_json::from_str(r#"{"fcn": {"inputSize": 30}}"#).unwrap();
        assert!(cfg.finish(None).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
