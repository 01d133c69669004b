//! Model configuration: dimensions, segmentation scale factors, loss
//! weights, optimizer schedule and ablation switches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mel: f64,
    pub lambda_sty: f64,
    pub lambda_con: f64,
    pub lambda_spk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mel: 4.0,
            lambda_sty: 0.1,
            lambda_con: 0.01,
            lambda_spk: 0.1,
        }
    }
}

/// Switches reproducing the ablation setups: block truncation, attention
/// averaging per level, removal of the cycle path and of individual losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Per block; missing entries mean `false`.
    pub uniform_temporal_attn: Vec<bool>,
    pub uniform_channel_attn: Vec<bool>,
    /// Number of TCR levels that are computed and fused. `0` means all.
    pub active_blocks: usize,
    pub disable_cycle: bool,
    pub disable_style_loss: bool,
    pub disable_content_loss: bool,
    pub disable_speaker_loss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mel_dim: usize,
    pub bnf_dim: usize,
    pub pitch_dim: usize,
    pub xvec_dim: usize,
    pub model_dim: usize,
    pub prenet_channels: usize,
    pub n_tcr_blocks: usize,
    pub gamma_t: usize,
    pub gamma_c: usize,
    pub gamma_tr: Vec<usize>,
    pub frame_shift_ms: f64,
    pub pitch_downsample: usize,
    pub content_layers: usize,
    pub smoother_layers: usize,
    pub loss_weights: LossWeights,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub ablation: Ablation,
    pub seed: u64,
    /// Seed of the frozen perceptual networks.
    pub frozen_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mel_dim: 80,
            bnf_dim: 256,
            pitch_dim: 1,
            xvec_dim: 192,
            model_dim: 256,
            prenet_channels: 256,
            n_tcr_blocks: 3,
            gamma_t: 4,
            gamma_c: 4,
            gamma_tr: vec![16, 4, 1],
            frame_shift_ms: 10.0,
            pitch_downsample: 8,
            content_layers: 2,
            smoother_layers: 2,
            loss_weights: LossWeights::default(),
            lr: 1e-5,
            lr_decay: 0.5,
            lr_decay_steps: 50_000,
            batch_size: 4,
            checkpoint_every: 1000,
            ablation: Ablation::default(),
            seed: 0,
            frozen_seed: 1234,
        }
    }
}

impl ModelConfig {
    /// Small configuration with fewer than 10^4 trainable parameters, used by
    /// the finite-difference gradient check.
    pub fn tiny() -> Self {
        Self {
            mel_dim: 6,
            bnf_dim: 5,
            xvec_dim: 4,
            model_dim: 8,
            prenet_channels: 8,
            n_tcr_blocks: 2,
            gamma_t: 2,
            gamma_c: 2,
            gamma_tr: vec![2, 1],
            pitch_downsample: 2,
            content_layers: 1,
            smoother_layers: 1,
            batch_size: 1,
            ..Self::default()
        }
    }

    /// Desk-scale configuration for quick training runs on a CPU. Keeps the
    /// published scale factors and loss weights but shrinks every width.
    pub fn desk() -> Self {
        Self {
            mel_dim: 20,
            bnf_dim: 16,
            xvec_dim: 16,
            model_dim: 32,
            prenet_channels: 64,
            lr: 2e-3,
            lr_decay_steps: 1000,
            batch_size: 2,
            checkpoint_every: 250,
            ..Self::default()
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            _ => serde_json::from_str(&text)?,
        };
        validate_config(cfg)
    }

    /// Number of TCR levels actually run (ablation truncation applied).
    pub fn active_blocks(&self) -> usize {
        if self.ablation.active_blocks == 0 {
            self.n_tcr_blocks
        } else {
            self.ablation.active_blocks
        }
    }

    /// Channel width entering block `level` (1-based); `level - 1 == 0` is the prenet.
    pub fn channels_at(&self, level: usize) -> usize {
        self.prenet_channels / self.gamma_c.pow(level as u32)
    }

    /// Frames covered by one channel-attention temporal range at `level`.
    pub fn frames_per_range(&self, level: usize) -> usize {
        self.gamma_t.pow(level as u32) * self.gamma_tr[level - 1]
    }

    /// Temporal multiple the speaker module needs: every level's segment
    /// arithmetic must come out even.
    pub fn speaker_multiple(&self) -> usize {
        (1..=self.n_tcr_blocks)
            .map(|l| self.frames_per_range(l))
            .fold(1, lcm)
    }

    /// Temporal multiple every padded utterance must satisfy (speaker module
    /// and pitch downsampling).
    pub fn required_multiple(&self) -> usize {
        lcm(self.speaker_multiple(), self.pitch_downsample)
    }

    pub fn uniform_temporal(&self, level: usize) -> bool {
        self.ablation
            .uniform_temporal_attn
            .get(level - 1)
            .copied()
            .unwrap_or(false)
    }

    pub fn uniform_channel(&self, level: usize) -> bool {
        self.ablation
            .uniform_channel_attn
            .get(level - 1)
            .copied()
            .unwrap_or(false)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub(crate) fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Returns the configuration unchanged when every constraint holds, or a
/// [`Error::Config`] listing each violation.
pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig> {
    let mut errs = Vec::new();
    for (name, v) in [
        ("mel_dim", cfg.mel_dim),
        ("bnf_dim", cfg.bnf_dim),
        ("xvec_dim", cfg.xvec_dim),
        ("model_dim", cfg.model_dim),
        ("prenet_channels", cfg.prenet_channels),
        ("n_tcr_blocks", cfg.n_tcr_blocks),
        ("pitch_downsample", cfg.pitch_downsample),
        ("batch_size", cfg.batch_size),
    ] {
        if v == 0 {
            errs.push(format!("{name} must be >= 1"));
        }
    }
    if cfg.pitch_dim != 1 {
        errs.push(format!(
            "pitch_dim={} but only 1-dim log-F0 is supported",
            cfg.pitch_dim
        ));
    }
    if cfg.gamma_t == 0 {
        errs.push("gamma_t must be >= 1".into());
    }
    if cfg.gamma_c == 0 {
        errs.push("gamma_c must be >= 1".into());
    }
    if cfg.gamma_tr.contains(&0) {
        errs.push(format!(
            "every gamma_tr entry must be >= 1, got {:?}",
            cfg.gamma_tr
        ));
    }
    if cfg.gamma_tr.len() != cfg.n_tcr_blocks {
        errs.push(format!(
            "gamma_tr has {} entries but n_tcr_blocks={}",
            cfg.gamma_tr.len(),
            cfg.n_tcr_blocks
        ));
    }
    if cfg.gamma_c >= 1 && cfg.n_tcr_blocks >= 1 {
        match cfg.gamma_c.checked_pow(cfg.n_tcr_blocks as u32) {
            Some(div) if cfg.prenet_channels.is_multiple_of(div) => {}
            Some(div) => errs.push(format!(
                "prenet_channels={} not divisible by gamma_c^n_tcr_blocks={}",
                cfg.prenet_channels, div
            )),
            None => errs.push("gamma_c^n_tcr_blocks overflows".into()),
        }
    }
    let active = cfg.ablation.active_blocks;
    if active != 0 && active > cfg.n_tcr_blocks {
        errs.push(format!(
            "ablation.active_blocks={} must lie in 1..={}",
            active, cfg.n_tcr_blocks
        ));
    }
    for (name, list) in [
        ("uniform_temporal_attn", &cfg.ablation.uniform_temporal_attn),
        ("uniform_channel_attn", &cfg.ablation.uniform_channel_attn),
    ] {
        if list.len() > cfg.n_tcr_blocks {
            errs.push(format!(
                "ablation.{name} has {} entries for {} blocks",
                list.len(),
                cfg.n_tcr_blocks
            ));
        }
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        errs.push(format!("lr must be positive, got {}", cfg.lr));
    }
    if !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        errs.push(format!("lr_decay must lie in (0, 1], got {}", cfg.lr_decay));
    }
    if cfg.lr_decay_steps == 0 {
        errs.push("lr_decay_steps must be >= 1".into());
    }
    let w = &cfg.loss_weights;
    for (name, v) in [
        ("lambda_mel", w.lambda_mel),
        ("lambda_sty", w.lambda_sty),
        ("lambda_con", w.lambda_con),
        ("lambda_spk", w.lambda_spk),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            errs.push(format!(
                "loss_weights.{name} must be a finite non-negative number"
            ));
        }
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_configuration_is_valid() {
        let cfg = validate_config(ModelConfig::default()).unwrap();
        assert_eq!(cfg, ModelConfig::default());
        assert_eq!(cfg.gamma_t, 4);
        assert_eq!(cfg.gamma_c, 4);
        assert_eq!(cfg.gamma_tr, vec![16, 4, 1]);
        // 64 frames at a 10 ms shift is the constant 640 ms channel-attention range.
        assert_eq!(cfg.speaker_multiple(), 64);
        for l in 1..=3 {
            assert_eq!(cfg.frames_per_range(l), 64);
        }
        assert_eq!(cfg.speaker_multiple() as f64 * cfg.frame_shift_ms, 640.0);
    }

    #[test]
    fn degenerate_segmentation_is_valid() {
        let cfg = ModelConfig {
            gamma_t: 1,
            gamma_c: 1,
            gamma_tr: vec![1],
            n_tcr_blocks: 1,
            prenet_channels: 8,
            ..ModelConfig::default()
        };
        assert!(validate_config(cfg).is_ok());
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let cfg = ModelConfig {
            prenet_channels: 100,
            ..ModelConfig::default()
        };
        let err = validate_config(cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("prenet_channels=100"), "{msg}");
        assert!(msg.contains("64"), "{msg}");
    }

    #[test]
    fn every_violation_is_reported() {
        let cfg = ModelConfig {
            prenet_channels: 100,
            gamma_tr: vec![16, 0],
            ablation: Ablation {
                active_blocks: 7,
                ..Ablation::default()
            },
            ..ModelConfig::default()
        };
        match validate_config(cfg) {
            Err(Error::Config(list)) => assert_eq!(list.len(), 4, "{list:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn presets_validate() {
        validate_config(ModelConfig::tiny()).unwrap();
        validate_config(ModelConfig::desk()).unwrap();
        assert_eq!(ModelConfig::tiny().required_multiple(), 4);
        assert_eq!(ModelConfig::desk().required_multiple(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"mel_dim": 4, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"mel_dim": 4}"#).unwrap();
        assert_eq!(ok.mel_dim, 4);
        assert!(toml::from_str::<ModelConfig>("gamma_t = 2\nextra = 3\n").is_err());
    }

    #[test]
    fn lcm_temporal_multiple() {
        let cfg = ModelConfig {
            gamma_t: 2,
            gamma_tr: vec![3, 1],
            n_tcr_blocks: 2,
            gamma_c: 2,
            prenet_channels: 8,
            ..ModelConfig::default()
        };
        // Level 1 needs 6 frames, level 2 needs 4: only a multiple of 12 serves both.
        assert_eq!(cfg.speaker_multiple(), 12);
    }
}
