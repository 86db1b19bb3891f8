//! Channel-selection policy comparison: how far does the content branch move
//! away from its unguided trajectory when the style channels are chosen by
//! low variance, high variance or at random?
//!
//! For each stage and seed the distance is the RMS difference between the
//! content latent of a run guided in that stage only and the unguided run from
//! the same noise. Guiding one stage at a time keeps the voxel sets equal, so
//! stage-2 latents are comparable row by row.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Latent};
use crate::conditioning::Conditioner;
use crate::error::{Result, SculptError};
use crate::hooks::StageAttention;
use crate::pipeline::{generate_pass, PassOutput, PipelineOptions};
use crate::sdfs::SelectionPolicy;
use crate::sgc::{default_k, ContentSource, GuidanceConfig, PassPlan, StyleSource};
use crate::synthetic::object_image;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightConfig {
    pub policies: Vec<SelectionPolicy>,
    pub seeds: Vec<u64>,
    /// Channels taken from the style branch per stage; `None` uses the
    /// default intensity.
    pub k_stage1: Option<usize>,
    pub k_stage2: Option<usize>,
    pub guidance: GuidanceConfig,
    pub pipeline: PipelineOptions,
    /// Side length of the synthetic content and style images.
    pub image_size: usize,
}

impl Default for InsightConfig {
    fn default() -> Self {
        Self {
            policies: SelectionPolicy::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3],
            k_stage1: None,
            k_stage2: None,
            guidance: GuidanceConfig::default(),
            pipeline: PipelineOptions::default(),
            image_size: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDistance {
    pub seed: u64,
    pub stage1: f64,
    pub stage2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: SelectionPolicy,
    pub per_seed: Vec<SeedDistance>,
    pub mean_stage1: f64,
    pub mean_stage2: f64,
    /// Mean over seeds and both stages; the headline statistic.
    pub content_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightReport {
    pub k_stage1: usize,
    pub k_stage2: usize,
    pub seeds: Vec<u64>,
    pub policies: Vec<PolicyReport>,
    /// `Some(true)` when low variance moved the content strictly less than
    /// high variance; `None` if either policy was not run.
    pub low_below_high: Option<bool>,
}

impl InsightReport {
    pub fn policy(&self, policy: SelectionPolicy) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == policy)
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "channel-selection policies, K = {} / {} (stage 1 / stage 2), seeds {:?}\n",
            self.k_stage1, self.k_stage2, self.seeds
        );
        out.push_str("policy         stage1_rms  stage2_rms  content_distance\n");
        for p in &self.policies {
            out.push_str(&format!(
                "{:<14} {:>10.6}  {:>10.6}  {:>16.6}\n",
                p.policy.as_str(),
                p.mean_stage1,
                p.mean_stage2,
                p.content_distance
            ));
        }
        match self.low_below_high {
            Some(true) => out.push_str("low_variance < high_variance: yes\n"),
            Some(false) => out.push_str("low_variance < high_variance: NO\n"),
            None => {}
        }
        out
    }
}

fn rms(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(SculptError::contract(format!(
            "cannot compare latents of shapes {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(((a - b).mapv(|d| d * d).sum() / a.len() as f64).sqrt())
}

fn plan(stage1: StageAttention, stage2: StageAttention) -> PassPlan {
    PassPlan {
        stage1,
        stage2,
        content: ContentSource::InputContent,
        style: StyleSource::InputStyles,
    }
}

pub fn validate_insight<B: Backbone + ?Sized>(
    backbone: &B,
    conditioner: &Conditioner,
    config: &InsightConfig,
) -> Result<InsightReport> {
    if config.policies.is_empty() || config.seeds.is_empty() {
        return Err(SculptError::config("the report needs at least one policy and one seed"));
    }
    let channels = backbone.channels();
    let (d1, d2) = default_k(channels);
    let (k1, k2) = (config.k_stage1.unwrap_or(d1), config.k_stage2.unwrap_or(d2));
    if k1 > channels || k2 > channels {
        return Err(SculptError::config(format!(
            "K exceeds the backbone's {channels} channels"
        )));
    }

    let per_seed: Vec<Vec<SeedDistance>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let content = object_image(seed, config.image_size, config.image_size)?;
            let style = object_image(seed.wrapping_add(0x5eed), config.image_size, config.image_size)?;
            let conditions = conditioner.prepare(&content, &[style])?;
            let run = |p: PassPlan| -> Result<PassOutput> {
                generate_pass(backbone, &conditions, &p, &config.guidance, &config.pipeline, seed, 1)
            };
            let off = StageAttention::SelfOnly;
            let reference = run(plan(off, off))?;
            config
                .policies
                .iter()
                .map(|&policy| {
                    let guided = |k| StageAttention::Disentangled { k, policy };
                    let first = run(plan(guided(k1), off))?;
                    let second = run(plan(off, guided(k2)))?;
                    Ok(SeedDistance {
                        seed,
                        stage1: rms(first.stage1.content.features(), reference.stage1.content.features())?,
                        stage2: rms(second.stage2.content.features(), reference.stage2.content.features())?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = config.seeds.len() as f64;
    let policies: Vec<PolicyReport> = config
        .policies
        .iter()
        .enumerate()
        .map(|(i, &policy)| {
            let rows: Vec<SeedDistance> = per_seed.iter().map(|s| s[i].clone()).collect();
            let mean_stage1 = rows.iter().map(|r| r.stage1).sum::<f64>() / n;
            let mean_stage2 = rows.iter().map(|r| r.stage2).sum::<f64>() / n;
            PolicyReport {
                policy,
                per_seed: rows,
                mean_stage1,
                mean_stage2,
                content_distance: (mean_stage1 + mean_stage2) / 2.0,
            }
        })
        .collect();

    let distance = |p| policies.iter().find(|r| r.policy == p).map(|r| r.content_distance);
    let low_below_high = distance(SelectionPolicy::LowVariance)
        .zip(distance(SelectionPolicy::HighVariance))
        .map(|(low, high)| low < high);
    Ok(InsightReport {
        k_stage1: k1,
        k_stage2: k2,
        seeds: config.seeds.clone(),
        policies,
        low_below_high,
    })
}
