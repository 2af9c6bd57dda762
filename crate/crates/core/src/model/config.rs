use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::partition::check_ratios;
use crate::patch::PatchGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Short-clip classification: cross-entropy on the CLS feature.
    Classify,
    /// Clip/caption contrastive training.
    Contrast,
    /// Long-video activity classification; same objective as `Classify`.
    LongClassify,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classify" => Some(Task::Classify),
            "contrast" => Some(Task::Contrast),
            "long_classify" | "long" => Some(Task::LongClassify),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Contrast => "contrast",
            Task::LongClassify => "long_classify",
        }
    }

    pub fn uses_classifier(self) -> bool {
        !matches!(self, Task::Contrast)
    }
}

/// Long-video input presets; the visible-token count is the same for all three.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LongPreset {
    F16,
    F32,
    F64,
}

impl LongPreset {
    pub const ALL: [LongPreset; 3] = [LongPreset::F16, LongPreset::F32, LongPreset::F64];

    /// `(frames, mask_ratio, recon_ratio)`.
    pub fn settings(self) -> (usize, f64, f64) {
        match self {
            LongPreset::F16 => (16, 0.5, 0.5),
            LongPreset::F32 => (32, 0.75, 0.25),
            LongPreset::F64 => (64, 0.875, 0.125),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f16" => Some(LongPreset::F16),
            "f32" => Some(LongPreset::F32),
            "f64" => Some(LongPreset::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LongPreset::F16 => "F16",
            LongPreset::F32 => "F32",
            LongPreset::F64 => "F64",
        }
    }
}

/// Architecture plus the masking ratios used for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurboConfig {
    pub geometry: PatchGeometry,
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub proj_dim: usize,
    /// Width of the frozen text features fed to the text projection head.
    pub text_dim: usize,
    pub mask_ratio: f64,
    pub recon_ratio: f64,
    pub task: Task,
    /// L2-normalize contrastive embeddings.
    pub normalize_embeddings: bool,
    /// Standardize each reconstruction target patch by its own statistics.
    pub normalize_targets: bool,
}

impl TurboConfig {
    /// Desk-scale preset: 8 frames of 32x32, patch 2x8x8, encoder 4x64, decoder 2x32.
    pub fn toy(task: Task) -> Self {
        Self {
            geometry: PatchGeometry::new(8, 32, 32, 3, (2, 8, 8)).unwrap(),
            enc_depth: 4,
            enc_dim: 64,
            enc_heads: 4,
            dec_depth: 2,
            dec_dim: 32,
            dec_heads: 2,
            mlp_ratio: 4,
            num_classes: 16,
            proj_dim: 32,
            text_dim: 64,
            mask_ratio: 0.5,
            recon_ratio: 0.5,
            task,
            normalize_embeddings: true,
            normalize_targets: true,
        }
    }

    /// Toy encoder on long videos sampled at one of the equal-budget presets.
    /// Patches are 2x16x16, so the shift between two sampled frames of a
    /// 32-frame sample mostly stays inside one patch.
    pub fn toy_long(preset: LongPreset) -> Self {
        let (frames, m, r) = preset.settings();
        Self {
            geometry: PatchGeometry::new(frames, 32, 32, 3, (2, 16, 16)).unwrap(),
            num_classes: 8,
            mask_ratio: m,
            recon_ratio: r,
            ..Self::toy(Task::LongClassify)
        }
    }

    /// ViT-B encoder (12x768) with the 8x512 decoder, 16 frames of 224x224, patch 2x16x16.
    pub fn reference() -> Self {
        Self {
            geometry: PatchGeometry::new(16, 224, 224, 3, (2, 16, 16)).unwrap(),
            enc_depth: 12,
            enc_dim: 768,
            enc_heads: 12,
            dec_depth: 8,
            dec_dim: 512,
            dec_heads: 8,
            mlp_ratio: 4,
            num_classes: 101,
            proj_dim: 256,
            text_dim: 768,
            mask_ratio: 0.75,
            recon_ratio: 0.25,
            task: Task::Classify,
            normalize_embeddings: true,
            normalize_targets: true,
        }
    }

    /// Reference encoder with a 4x384 decoder; this decoder size is the one
    /// the published GFLOPs figures are consistent with.
    pub fn reference_calibration() -> Self {
        Self { dec_depth: 4, dec_dim: 384, dec_heads: 6, ..Self::reference() }
    }

    pub fn n_tokens(&self) -> usize {
        self.geometry.n()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_dim == 0 || self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            return Err(TurboError::Config(format!(
                "enc_dim {} not divisible by enc_heads {}",
                self.enc_dim, self.enc_heads
            )));
        }
        if self.dec_depth > 0 && (self.dec_dim == 0 || self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0) {
            return Err(TurboError::Config(format!(
                "dec_dim {} not divisible by dec_heads {}",
                self.dec_dim, self.dec_heads
            )));
        }
        if self.task.uses_classifier() && self.num_classes < 2 {
            return Err(TurboError::Config("num_classes must be at least 2".into()));
        }
        if self.mlp_ratio == 0 || self.proj_dim == 0 || self.text_dim == 0 {
            return Err(TurboError::Config("mlp_ratio, proj_dim and text_dim must be positive".into()));
        }
        check_ratios(self.mask_ratio, self.recon_ratio)?;
        if self.mask_ratio >= 1.0 {
            return Err(TurboError::Config("mask ratio must be below 1".into()));
        }
        if self.recon_ratio > 0.0 && self.dec_depth == 0 {
            return Err(TurboError::Config("reconstruction needs a decoder (dec_depth > 0)".into()));
        }
        Ok(())
    }
}
