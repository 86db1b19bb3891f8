//! Two-stage, multi-branch generation: noise management, stage handoff,
//! hook installation per pass, multi-pass plans and intensity sweeps.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    decode_sparse_structure, grid_index, sample_stage1, sample_stage2, Backbone, Coord, DenseLatent, SamplerOptions,
    SparseLatent, TimeSchedule,
};
use crate::branch::{Branch, BranchSet};
use crate::conditioning::{ConditionEmbedding, Conditioner, ImageInput, PreparedConditions};
use crate::error::{Result, SculptError};
use crate::export::{export_asset, render_asset, Asset, PassSummary};
use crate::hooks::{install_hooks, MaskTraceEntry, PlainAttention, SiteCounters, SiteId, Stage, StyleProcessor};
use crate::sgc::{resolve_stage_plan, ContentSource, GuidanceConfig, GuidanceMode, PassPlan, StagePlan, StyleSource};
use crate::tensor::{seeded_rng, standard_normal, Matrix};

const STAGE1_NOISE_STREAM: u64 = 1;
const STAGE2_NOISE_STREAM: u64 = 2;

/// Initial noise for stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Noise {
    /// A second grid drawn from its own stream.
    #[default]
    Fresh,
    /// The stage-1 grid, gathered at the decoded voxels.
    ReuseStage1,
}

/// Voxel set the edge branch denoises over in stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeGeometry {
    /// The style branch's voxels, so edge and style tokens line up.
    #[default]
    StyleVoxels,
    /// The edge branch's own stage-1 structure.
    OwnVoxels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub occupancy_threshold: f64,
    pub stage2_noise: Stage2Noise,
    pub edge_geometry: EdgeGeometry,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            occupancy_threshold: 0.5,
            stage2_noise: Stage2Noise::Fresh,
            edge_geometry: EdgeGeometry::StyleVoxels,
        }
    }
}

/// Initial noise actually fed to each branch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    /// Full `[R³, C]` grid every stage-1 branch starts from.
    pub stage1: Matrix,
    /// Full `[R³, C]` grid the stage-2 rows are gathered from.
    pub stage2_grid: Matrix,
    /// Per-branch stage-2 rows, aligned with that branch's voxels.
    pub stage2: BranchSet<Matrix>,
}

#[derive(Debug, Clone)]
pub struct PassOutput {
    /// 1-based.
    pub pass: usize,
    pub plan: PassPlan,
    pub stage1: BranchSet<DenseLatent>,
    /// Stage-2 voxel set of every branch that ran in stage 2.
    pub voxels: BranchSet<Vec<Coord>>,
    pub stage2: BranchSet<SparseLatent>,
    pub noise: NoiseRecord,
    pub counters: BTreeMap<SiteId, SiteCounters>,
    pub trace: Vec<MaskTraceEntry>,
}

impl PassOutput {
    pub fn stage_counters(&self, stage: Stage) -> SiteCounters {
        self.counters
            .iter()
            .filter(|(id, _)| id.stage == stage)
            .fold(SiteCounters::default(), |mut acc, (_, c)| {
                acc.calls += c.calls;
                acc.self_attention += c.self_attention;
                acc.cross_attention += c.cross_attention;
                acc
            })
    }

    pub fn summary(&self, channels: usize) -> PassSummary {
        PassSummary {
            stage1: self.plan.stage1,
            stage2: self.plan.stage2,
            k_stage1: self.plan.stage1.k(channels),
            k_stage2: self.plan.stage2.k(channels),
            stage1_counters: self.stage_counters(Stage::Structure),
            stage2_counters: self.stage_counters(Stage::Latent),
        }
    }
}

pub fn stage1_noise<B: Backbone + ?Sized>(backbone: &B, seed: u64) -> Matrix {
    let r = backbone.resolution();
    standard_normal(
        &mut seeded_rng(seed, STAGE1_NOISE_STREAM),
        r * r * r,
        backbone.channels(),
    )
}

fn stage2_grid<B: Backbone + ?Sized>(backbone: &B, seed: u64, policy: Stage2Noise, stage1: &Matrix) -> Matrix {
    match policy {
        Stage2Noise::ReuseStage1 => stage1.clone(),
        Stage2Noise::Fresh => {
            let r = backbone.resolution();
            standard_normal(
                &mut seeded_rng(seed, STAGE2_NOISE_STREAM),
                r * r * r,
                backbone.channels(),
            )
        }
    }
}

/// Rows of `grid` at `voxels`, in voxel order.
pub fn gather_rows(grid: &Matrix, voxels: &[Coord], resolution: usize) -> Matrix {
    let rows: Vec<usize> = voxels.iter().map(|c| grid_index(*c, resolution)).collect();
    grid.select(ndarray::Axis(0), &rows)
}

fn required(what: Option<&ConditionEmbedding>, branch: Branch) -> Result<&ConditionEmbedding> {
    what.ok_or_else(|| SculptError::contract(format!("the plan needs a {branch} condition but none was prepared")))
}

/// One pass of the two-stage pipeline under `plan`.
///
/// Stage 1 runs the style branch whenever either stage reads from it, since
/// stage 2's style voxels come from the style branch's structure.
pub fn generate_pass<B: Backbone + ?Sized>(
    backbone: &B,
    conditions: &PreparedConditions,
    plan: &PassPlan,
    guidance: &GuidanceConfig,
    options: &PipelineOptions,
    seed: u64,
    pass: usize,
) -> Result<PassOutput> {
    let r = backbone.resolution();
    let style1 = plan.uses_style();
    let edge1 = plan.stage1.needs_selection()
        || (plan.stage2.needs_selection() && options.edge_geometry == EdgeGeometry::OwnVoxels);
    let style2 = plan.stage2.uses_style();
    let edge2 = plan.stage2.needs_selection();

    let condition_set = |style: bool, edge: bool| -> Result<BranchSet<ConditionEmbedding>> {
        Ok(BranchSet {
            content: conditions.content.clone(),
            preserve: None,
            style: style
                .then(|| required(conditions.style.as_ref(), Branch::Style).cloned())
                .transpose()?,
            edge: edge
                .then(|| required(conditions.edge.as_ref(), Branch::Edge).cloned())
                .transpose()?,
        })
    };
    let conds1 = condition_set(style1, edge1)?;
    let conds2 = condition_set(style2, edge2)?;

    let processor = StyleProcessor::new(plan.stage1, plan.stage2, guidance.seed)
        .with_pass(pass)
        .with_frozen_mask(guidance.freeze_mask);
    let mut hooks = install_hooks(backbone.attention_sites(), backbone.declared_site_count(), processor)?;

    let grid1 = stage1_noise(backbone, seed);
    let noise1 = conds1
        .as_ref()
        .try_map(|_, _| DenseLatent::new(r, grid1.clone(), 1.0))?;
    let stage1 = sample_stage1(
        backbone,
        &conds1,
        noise1,
        &TimeSchedule::new(guidance.steps_stage1)?,
        SamplerOptions::new(guidance.cfg_stage1).with_preserve(plan.stage1.needs_selection()),
        &mut hooks,
    )?;

    let decode = |latent: Option<&DenseLatent>, branch: Branch| -> Result<Vec<Coord>> {
        let latent = latent.ok_or_else(|| SculptError::contract(format!("stage 1 did not run the {branch} branch")))?;
        decode_sparse_structure(backbone, latent, options.occupancy_threshold)
    };
    let content_voxels = decode(Some(&stage1.content), Branch::Content)?;
    let style_voxels = style2
        .then(|| decode(stage1.style.as_ref(), Branch::Style))
        .transpose()?;
    let edge_voxels = if edge2 {
        Some(match options.edge_geometry {
            EdgeGeometry::StyleVoxels => style_voxels
                .clone()
                .ok_or_else(|| SculptError::contract("edge voxels follow the style branch, which did not run"))?,
            EdgeGeometry::OwnVoxels => decode(stage1.edge.as_ref(), Branch::Edge)?,
        })
    } else {
        None
    };
    let voxels = BranchSet {
        content: content_voxels,
        preserve: None,
        style: style_voxels,
        edge: edge_voxels,
    };

    let grid2 = stage2_grid(backbone, seed, options.stage2_noise, &grid1);
    let rows = voxels.as_ref().map(|_, v| gather_rows(&grid2, v, r));
    let noise2 = rows
        .clone()
        .try_map(|b, m| SparseLatent::new(r, voxels.get(b).expect("voxels per branch").clone(), m, 1.0))?;
    let stage2 = sample_stage2(
        backbone,
        &conds2,
        &voxels,
        noise2,
        &TimeSchedule::new(guidance.steps_stage2)?,
        SamplerOptions::new(guidance.cfg_stage2).with_preserve(plan.stage2.needs_selection()),
        &mut hooks,
    )?;

    let (processor, counters) = hooks.into_parts();
    Ok(PassOutput {
        pass,
        plan: *plan,
        stage1,
        voxels,
        stage2,
        noise: NoiseRecord {
            stage1: grid1,
            stage2_grid: grid2,
            stage2: rows,
        },
        counters,
        trace: processor.into_trace(),
    })
}

/// The host's own image-to-3D path: content branch only, unmodified
/// attention, same noise streams as [`generate_pass`].
pub fn plain_generation<B: Backbone + ?Sized>(
    backbone: &B,
    content: &ConditionEmbedding,
    guidance: &GuidanceConfig,
    options: &PipelineOptions,
    seed: u64,
) -> Result<SparseLatent> {
    let r = backbone.resolution();
    let mut hooks = install_hooks(
        backbone.attention_sites(),
        backbone.declared_site_count(),
        PlainAttention,
    )?;
    let conds = BranchSet::content_only(content.clone());
    let grid1 = stage1_noise(backbone, seed);
    let stage1 = sample_stage1(
        backbone,
        &conds,
        BranchSet::content_only(DenseLatent::new(r, grid1.clone(), 1.0)?),
        &TimeSchedule::new(guidance.steps_stage1)?,
        SamplerOptions::new(guidance.cfg_stage1),
        &mut hooks,
    )?;
    let voxels = decode_sparse_structure(backbone, &stage1.content, options.occupancy_threshold)?;
    let grid2 = stage2_grid(backbone, seed, options.stage2_noise, &grid1);
    let rows = gather_rows(&grid2, &voxels, r);
    let stage2 = sample_stage2(
        backbone,
        &conds,
        &BranchSet::content_only(voxels.clone()),
        BranchSet::content_only(SparseLatent::new(r, voxels, rows, 1.0)?),
        &TimeSchedule::new(guidance.steps_stage2)?,
        SamplerOptions::new(guidance.cfg_stage2),
        &mut hooks,
    )?;
    Ok(stage2.content)
}

/// Raw images for a run and the conditioner that embeds them.
#[derive(Clone, Copy)]
pub struct RunInputs<'a> {
    pub conditioner: &'a Conditioner,
    pub content: &'a ImageInput,
    pub styles: &'a [ImageInput],
}

/// Every pass of a plan plus the final asset.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub plan: StagePlan,
    pub passes: Vec<PassOutput>,
    /// Asset of each pass, in order.
    pub assets: Vec<Asset>,
    /// Content image fed to each pass (after any rendering).
    pub pass_content: Vec<ImageInput>,
    /// Style images fed to each pass.
    pub pass_styles: Vec<Vec<ImageInput>>,
}

impl RunOutcome {
    pub fn final_pass(&self) -> &PassOutput {
        self.passes.last().expect("a plan has at least one pass")
    }

    pub fn final_asset(&self) -> &Asset {
        self.assets.last().expect("a plan has at least one pass")
    }

    pub fn mask_trace(&self) -> Vec<MaskTraceEntry> {
        self.passes.iter().flat_map(|p| p.trace.iter().cloned()).collect()
    }
}

/// Runs the full plan for `guidance.mode`. Later passes may take their
/// content from a render of an earlier pass's asset.
pub fn run_with_inputs<B: Backbone + ?Sized>(
    backbone: &B,
    inputs: RunInputs<'_>,
    guidance: &GuidanceConfig,
    options: &PipelineOptions,
    seed: u64,
) -> Result<RunOutcome> {
    let RunInputs {
        conditioner,
        content,
        styles,
    } = inputs;
    let plan = resolve_stage_plan(guidance, backbone.channels())?;
    let mut passes = Vec::with_capacity(plan.passes.len());
    let mut assets: Vec<Asset> = Vec::with_capacity(plan.passes.len());
    let mut pass_content = Vec::new();
    let mut pass_styles = Vec::new();

    for (i, pass_plan) in plan.passes.iter().enumerate() {
        let pass = i + 1;
        let within = |e: SculptError| e.in_pass(pass);
        let content_image = match pass_plan.content {
            ContentSource::InputContent => content.clone(),
            ContentSource::RenderOfPass { pass: earlier } => {
                let asset = assets
                    .get(earlier.wrapping_sub(1))
                    .ok_or_else(|| {
                        SculptError::contract(format!("pass {pass} renders pass {earlier}, which has not run"))
                    })
                    .map_err(within)?;
                render_asset(asset, conditioner.config().resolution).map_err(within)?
            }
        };
        let style_images: Vec<ImageInput> = match pass_plan.style {
            StyleSource::None => Vec::new(),
            StyleSource::InputStyles => styles.to_vec(),
            StyleSource::InputContent => vec![content.clone()],
        };
        if pass_plan.uses_style() && style_images.is_empty() {
            return Err(SculptError::config(format!(
                "mode {} needs at least one style image",
                guidance.mode
            )));
        }
        let conditions = conditioner.prepare(&content_image, &style_images).map_err(within)?;
        let output = generate_pass(backbone, &conditions, pass_plan, guidance, options, seed, pass).map_err(within)?;
        assets.push(export_asset(backbone, &output.stage2.content).map_err(within)?);
        passes.push(output);
        pass_content.push(content_image);
        pass_styles.push(style_images);
    }
    Ok(RunOutcome {
        plan,
        passes,
        assets,
        pass_content,
        pass_styles,
    })
}

/// Two passes: a dual pass with the full channel budget, then a pass whose
/// content is a render of the first asset and whose style is the original
/// content image, with stage-1 guidance disabled.
pub fn geometry_only_pipeline<B: Backbone + ?Sized>(
    backbone: &B,
    inputs: RunInputs<'_>,
    guidance: &GuidanceConfig,
    options: &PipelineOptions,
    seed: u64,
) -> Result<RunOutcome> {
    if guidance.mode != GuidanceMode::GeometryOnly {
        return Err(SculptError::contract(format!(
            "geometry-only pipeline called with mode {}",
            guidance.mode
        )));
    }
    run_with_inputs(backbone, inputs, guidance, options, seed)
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub k: usize,
    pub outcome: RunOutcome,
}

/// One dual-mode run per `k`, applied to both stages, all from the same seed.
/// Runs execute concurrently and come back in input order.
pub fn intensity_sweep<B: Backbone + ?Sized>(
    backbone: &B,
    inputs: RunInputs<'_>,
    guidance: &GuidanceConfig,
    options: &PipelineOptions,
    seed: u64,
    k_values: &[usize],
) -> Result<Vec<SweepRun>> {
    let channels = backbone.channels();
    if let Some(k) = k_values.iter().find(|k| **k > channels) {
        return Err(SculptError::config(format!(
            "sweep K = {k} exceeds the backbone's {channels} channels"
        )));
    }
    k_values
        .par_iter()
        .map(|&k| {
            let run_guidance = GuidanceConfig {
                mode: GuidanceMode::Dual,
                k_stage1: Some(k),
                k_stage2: Some(k),
                ..guidance.clone()
            };
            let outcome = run_with_inputs(backbone, inputs, &run_guidance, options, seed)?;
            Ok(SweepRun { k, outcome })
        })
        .collect()
}
