//! Guidance control: maps a requested mode and intensity to what each stage's
//! attention does, for one pass or for the two-pass geometry-only procedure.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SculptError};
use crate::hooks::StageAttention;
use crate::sdfs::SelectionPolicy;

/// Fraction of channels taken from the style branch in stage 1 at default
/// intensity (80 of 1024).
const STAGE1_FRACTION: f64 = 80.0 / 1024.0;
/// Stage-2 counterpart (800 of 1024).
const STAGE2_FRACTION: f64 = 800.0 / 1024.0;
const TEXTURE_DIVISOR: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    Dual,
    TextureOnly,
    GeometryOnly,
    Off,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dual => "dual",
            Self::TextureOnly => "texture_only",
            Self::GeometryOnly => "geometry_only",
            Self::Off => "off",
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceMode {
    type Err = SculptError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dual" => Ok(Self::Dual),
            "texture_only" | "texture" => Ok(Self::TextureOnly),
            "geometry_only" | "geometry" => Ok(Self::GeometryOnly),
            "off" | "none" => Ok(Self::Off),
            other => Err(SculptError::contract(format!(
                "unknown guidance mode {other:?}; expected dual, texture_only, geometry_only or off"
            ))),
        }
    }
}

/// Per-stage channel counts at default intensity for a backbone with
/// `channels` attention channels.
pub fn default_k(channels: usize) -> (usize, usize) {
    let c = channels as f64;
    (
        (STAGE1_FRACTION * c).round() as usize,
        (STAGE2_FRACTION * c).round() as usize,
    )
}

/// Texture-only defaults: a quarter of the dual fractions.
pub fn texture_k(channels: usize) -> (usize, usize) {
    let c = channels as f64;
    (
        (STAGE1_FRACTION * c / TEXTURE_DIVISOR).round() as usize,
        (STAGE2_FRACTION * c / TEXTURE_DIVISOR).round() as usize,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Overrides the stage-1 default K (dual, and pass 1 of geometry-only).
    pub k_stage1: Option<usize>,
    pub k_stage2: Option<usize>,
    /// Overrides the reduced K used by texture-only and geometry-only pass 2.
    pub texture_k_stage1: Option<usize>,
    pub texture_k_stage2: Option<usize>,
    pub cfg_stage1: f64,
    pub cfg_stage2: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub policy: SelectionPolicy,
    /// Seeds the random selection policy.
    pub seed: u64,
    /// Keep the first mask of each site for the remaining steps.
    pub freeze_mask: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Dual,
            k_stage1: None,
            k_stage2: None,
            texture_k_stage1: None,
            texture_k_stage2: None,
            cfg_stage1: 6.5,
            cfg_stage2: 3.5,
            steps_stage1: 100,
            steps_stage2: 100,
            policy: SelectionPolicy::LowVariance,
            seed: 0,
            freeze_mask: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.steps_stage1 == 0 || self.steps_stage2 == 0 {
            return Err(SculptError::config("step counts must be at least 1"));
        }
        for (name, cfg) in [("cfg_stage1", self.cfg_stage1), ("cfg_stage2", self.cfg_stage2)] {
            if !(cfg.is_finite() && cfg >= 0.0) {
                return Err(SculptError::config(format!(
                    "{name} must be a finite value ≥ 0, got {cfg}"
                )));
            }
        }
        for (name, k) in [
            ("k_stage1", self.k_stage1),
            ("k_stage2", self.k_stage2),
            ("texture_k_stage1", self.texture_k_stage1),
            ("texture_k_stage2", self.texture_k_stage2),
        ] {
            if let Some(k) = k.filter(|k| *k > channels) {
                return Err(SculptError::config(format!(
                    "{name} = {k} exceeds the backbone's {channels} channels"
                )));
            }
        }
        Ok(())
    }

    fn dual_k(&self, channels: usize) -> (usize, usize) {
        let (d1, d2) = default_k(channels);
        (self.k_stage1.unwrap_or(d1), self.k_stage2.unwrap_or(d2))
    }

    fn texture_k(&self, channels: usize) -> (usize, usize) {
        let (t1, t2) = texture_k(channels);
        (self.texture_k_stage1.unwrap_or(t1), self.texture_k_stage2.unwrap_or(t2))
    }
}

/// Where a pass's content condition comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ContentSource {
    InputContent,
    /// Rendered view of the asset produced by an earlier pass (1-based).
    RenderOfPass {
        pass: usize,
    },
}

/// Where a pass's style (and edge) conditions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    None,
    InputStyles,
    /// The original content image serves as the style reference.
    InputContent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassPlan {
    pub stage1: StageAttention,
    pub stage2: StageAttention,
    pub content: ContentSource,
    pub style: StyleSource,
}

impl PassPlan {
    pub fn uses_style(&self) -> bool {
        self.stage1.uses_style() || self.stage2.uses_style()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub mode: GuidanceMode,
    pub passes: Vec<PassPlan>,
}

/// Pure function of the configuration and the backbone width.
pub fn resolve_stage_plan(config: &GuidanceConfig, channels: usize) -> Result<StagePlan> {
    config.validate(channels)?;
    let policy = config.policy;
    let disentangled = |k| StageAttention::Disentangled { k, policy };
    let single = |stage1, stage2| PassPlan {
        stage1,
        stage2,
        content: ContentSource::InputContent,
        style: StyleSource::InputStyles,
    };
    let passes = match config.mode {
        GuidanceMode::Off => vec![PassPlan {
            stage1: StageAttention::SelfOnly,
            stage2: StageAttention::SelfOnly,
            content: ContentSource::InputContent,
            style: StyleSource::None,
        }],
        GuidanceMode::Dual => {
            let (k1, k2) = config.dual_k(channels);
            vec![single(disentangled(k1), disentangled(k2))]
        }
        GuidanceMode::TextureOnly => {
            let (k1, k2) = config.texture_k(channels);
            vec![single(disentangled(k1), disentangled(k2))]
        }
        GuidanceMode::GeometryOnly => {
            let (k1, k2) = config.dual_k(channels);
            let (_, texture_k2) = config.texture_k(channels);
            vec![
                single(disentangled(k1), disentangled(k2)),
                PassPlan {
                    stage1: StageAttention::SelfOnly,
                    stage2: disentangled(texture_k2),
                    content: ContentSource::RenderOfPass { pass: 1 },
                    style: StyleSource::InputContent,
                },
            ]
        }
    };
    Ok(StagePlan {
        mode: config.mode,
        passes,
    })
}
