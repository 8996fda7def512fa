//! Pipeline configuration. Every section rejects unknown keys so a typo in an
//! ablation flag fails loudly instead of silently running the full model.

use serde::{Deserialize, Serialize};

use crate::assoc::AssocConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0:?}")]
    Invalid(Vec<String>),
    #[error("configuration parse error")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Random Fourier frequencies per input column.
    pub n_freq: usize,
    pub freq_std: f64,
    /// Stacked ST-A -> M-A -> SS-A rounds.
    pub rounds: usize,
    pub r_social: f64,
    pub r_map: f64,
    /// LL-A neighbourhood radius between polygon entry poses.
    pub r_lane: f64,
    /// ST-A look-back in frames; `None` means the whole encoded history.
    pub tau_history: Option<usize>,
    /// Number of most recent history frames turned into tokens; `None` means
    /// all of them.
    pub encode_frames: Option<usize>,
    /// Feed the signal colour as a one-hot next to the trend value.
    pub color_one_hot: bool,
    /// Disable to re-encode the map for every agent (benchmark only).
    pub map_cache: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            hidden: 128,
            n_freq: 8,
            freq_std: 1.0,
            rounds: 2,
            r_social: 50.0,
            r_map: 30.0,
            r_lane: 50.0,
            tau_history: None,
            encode_frames: None,
            color_one_hot: true,
            map_cache: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regression {
    Laplace,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Number of modes K.
    pub modes: usize,
    /// Recurrent proposal chunks R; must divide `horizon`.
    pub chunks: usize,
    /// Predicted future frames T'.
    pub horizon: usize,
    pub lambda: f64,
    pub regression: Regression,
    /// Polygons within this distance of the target feed MM-A.
    pub r_map: f64,
    /// Stop gradients from the refinement stage flowing into the proposals.
    pub detach_anchors: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            modes: 6,
            chunks: 5,
            horizon: 50,
            lambda: 1.0,
            regression: Regression::Laplace,
            r_map: 50.0,
            detach_anchors: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Half-width of the cross-view key window, frames.
    pub window: usize,
    pub spectral: bool,
    pub fill_in: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            window: 5,
            spectral: true,
            fill_in: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    /// Cosine decay of the learning rate down to `lr * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 64,
            lr: 5e-4,
            weight_decay: 0.01,
            batch: 16,
            seed: 7,
            min_lr_ratio: 0.05,
            grad_clip: Some(5.0),
        }
    }
}

/// Ablation switches; all `true` is the full model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_st_a: bool,
    pub use_m_a: bool,
    pub use_ss_a: bool,
    pub use_signals: bool,
    /// Identity correction before fusion; off keeps raw per-view ids and only
    /// resolves the one-to-one map from uncorrected overlaps.
    pub use_mvcm: bool,
    /// Identity-aligned fusion; off lets ego tokens attend any nearby
    /// other-view token at the same frame.
    pub use_fam: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_st_a: true,
            use_m_a: true,
            use_ss_a: true,
            use_signals: true,
            use_mvcm: true,
            use_fam: true,
        }
    }
}

/// The parts of [`PipelineConfig`] that determine the network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub ablation: AblationFlags,
    /// Seed of the parameter initialiser.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub assoc: AssocConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl ModelConfig {
    /// Small network used by the toy training runs and fast tests.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                d_model: 16,
                heads: 2,
                hidden: 32,
                n_freq: 4,
                rounds: 1,
                encode_frames: Some(6),
                r_map: 15.0,
                ..EncoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let e = &self.encoder;
        if e.d_model == 0 || e.heads == 0 || e.d_model % e.heads != 0 {
            v.push(format!("encoder.heads ({}) must divide encoder.d_model ({})", e.heads, e.d_model));
        }
        if e.hidden == 0 {
            v.push("encoder.hidden must be positive".into());
        }
        for (name, r) in [("r_social", e.r_social), ("r_map", e.r_map), ("r_lane", e.r_lane)] {
            if !(r > 0.0) {
                v.push(format!("encoder.{name} must be positive"));
            }
        }
        if e.encode_frames == Some(0) {
            v.push("encoder.encode_frames must be >= 1".into());
        }
        if e.tau_history == Some(0) {
            v.push("encoder.tau_history must be >= 1".into());
        }
        let d = &self.decoder;
        if d.modes == 0 {
            v.push("decoder.modes must be >= 1".into());
        }
        if d.chunks == 0 || d.horizon == 0 || d.horizon % d.chunks != 0 {
            v.push(format!("decoder.chunks ({}) must divide decoder.horizon ({})", d.chunks, d.horizon));
        }
        if !(d.lambda >= 0.0) {
            v.push("decoder.lambda must be non-negative".into());
        }
        if !(d.r_map > 0.0) {
            v.push("decoder.r_map must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = self.model.violations();
        if let Err(e) = self.assoc.validate() {
            v.push(e.to_string());
        }
        let t = &self.training;
        if t.batch == 0 {
            v.push("training.batch must be >= 1".into());
        }
        if !(t.lr > 0.0) {
            v.push("training.lr must be positive".into());
        }
        if !(t.weight_decay >= 0.0) {
            v.push("training.weight_decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&t.min_lr_ratio) {
            v.push("training.min_lr_ratio must be in [0,1]".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_json(r#"{"model": {"ablation": {"use_sta": false}}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn all_violations_are_listed() {
        let text = r#"{"model": {"encoder": {"heads": 5, "r_map": -1}, "decoder": {"modes": 0}}, "training": {"batch": 0}}"#;
        match PipelineConfig::from_json(text).unwrap_err() {
            ConfigError::Invalid(v) => assert_eq!(v.len(), 4, "{v:?}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn defaults_are_the_full_model() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg.model.ablation, AblationFlags::default());
        assert_eq!(cfg.model.decoder.modes, 6);
        assert_eq!(cfg.training.epochs, 64);
    }
}
