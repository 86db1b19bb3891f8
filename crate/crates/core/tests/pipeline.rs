mod common;

use std::collections::BTreeSet;

use ndarray::Array1;

use common::*;
use sculpt::backbone::{decode_sparse_structure, Backbone, BranchInput, DenseLatent, Latent, SparseLatent};
use sculpt::branch::{Branch, BranchSet};
use sculpt::hooks::{AttentionSite, CfgPass, SiteHook, Stage};
use sculpt::pipeline::{
    gather_rows, generate_pass, intensity_sweep, run_with_inputs, PipelineOptions, RunInputs, Stage2Noise,
};
use sculpt::sgc::{GuidanceConfig, GuidanceMode};
use sculpt::tensor::Matrix;
use sculpt::SculptError;

const SEED: u64 = 3;

#[test]
fn stage2_runs_on_the_decoded_content_structure() {
    let backbone = ci_backbone();
    let conditioner = conditioner_for(&backbone);
    let (content, styles) = (content_image(), vec![style_image()]);
    let conditions = conditioner.prepare(&content, &styles).unwrap();
    let plan = sculpt::sgc::resolve_stage_plan(&ci_guidance(GuidanceMode::Dual), backbone.channels())
        .unwrap()
        .passes[0];
    let out = generate_pass(
        &backbone,
        &conditions,
        &plan,
        &ci_guidance(GuidanceMode::Dual),
        &PipelineOptions::default(),
        SEED,
        1,
    )
    .unwrap();

    let decoded = decode_sparse_structure(&backbone, &out.stage1.content, 0.5).unwrap();
    assert_eq!(out.voxels.content, decoded);
    assert_eq!(out.stage2.content.coords(), decoded.as_slice());
    assert_eq!(out.stage2.content.timestep(), 0.0);
    // Default edge geometry follows the style structure.
    assert_eq!(out.voxels.edge, out.voxels.style);
    assert_eq!(
        out.stage2.edge.as_ref().unwrap().coords(),
        out.voxels.style.as_ref().unwrap().as_slice()
    );
    // Stage-2 noise is the shared grid gathered at each branch's voxels.
    let r = backbone.resolution();
    assert_eq!(
        out.noise.stage2.content,
        gather_rows(&out.noise.stage2_grid, &decoded, r)
    );
    assert_ne!(out.noise.stage2_grid, out.noise.stage1);
}

#[test]
fn reusing_stage1_noise_for_stage2_is_opt_in() {
    let backbone = ci_backbone();
    let conditioner = conditioner_for(&backbone);
    let conditions = conditioner.prepare(&content_image(), &[]).unwrap();
    let guidance = ci_guidance(GuidanceMode::Off);
    let plan = sculpt::sgc::resolve_stage_plan(&guidance, backbone.channels())
        .unwrap()
        .passes[0];
    let options = PipelineOptions {
        stage2_noise: Stage2Noise::ReuseStage1,
        ..PipelineOptions::default()
    };
    let out = generate_pass(&backbone, &conditions, &plan, &guidance, &options, SEED, 1).unwrap();
    assert_eq!(out.noise.stage2_grid, out.noise.stage1);
}

#[test]
fn style_equal_to_content_reproduces_the_unguided_asset() {
    let backbone = ci_backbone();
    let conditioner = conditioner_for(&backbone);
    let content = content_image();
    let styles = vec![content.clone()];
    let inputs = RunInputs {
        conditioner: &conditioner,
        content: &content,
        styles: &styles,
    };
    let options = PipelineOptions::default();
    let off = run_with_inputs(&backbone, inputs, &ci_guidance(GuidanceMode::Off), &options, SEED).unwrap();
    let dual = run_with_inputs(&backbone, inputs, &ci_guidance(GuidanceMode::Dual), &options, SEED).unwrap();
    let (a, b) = (&off.final_pass().stage2.content, &dual.final_pass().stage2.content);
    assert_eq!(a.coords(), b.coords());
    let d = max_abs_diff(a.features(), b.features());
    assert!(d <= 1e-5, "max diff {d:e}");
}

#[test]
fn default_schedule_counts_one_cross_call_per_site_and_step() {
    let backbone = ci_backbone();
    let conditioner = conditioner_for(&backbone);
    let (content, styles) = (content_image(), vec![style_image()]);
    let guidance = GuidanceConfig::default();
    let outcome = run_with_inputs(
        &backbone,
        RunInputs {
            conditioner: &conditioner,
            content: &content,
            styles: &styles,
        },
        &guidance,
        &PipelineOptions::default(),
        SEED,
    )
    .unwrap();
    let pass = outcome.final_pass();
    let depth = ci_config().depth as u64;
    assert_eq!(pass.stage_counters(Stage::Structure).cross_attention, 100 * depth);
    assert_eq!(pass.stage_counters(Stage::Latent).cross_attention, 100 * depth);
    let total: u64 = pass.counters.values().map(|c| c.cross_attention).sum();
    assert_eq!(total, 800);
    // Every conditional site call consults the mask once.
    assert_eq!(pass.trace.len(), 800);
    // Conditional calls attend for content, preserve, style and edge; the
    // unconditional half has no preserve branch.
    for stage in [Stage::Structure, Stage::Latent] {
        let c = pass.stage_counters(stage);
        assert_eq!(c.calls, 2 * 100 * depth);
        assert_eq!(c.self_attention + c.cross_attention, 100 * depth * (4 + 3));
    }
}

#[test]
fn sweep_runs_each_k_on_both_stages() {
    let backbone = ci_backbone();
    let conditioner = conditioner_for(&backbone);
    let (content, styles) = (content_image(), vec![style_image()]);
    let inputs = RunInputs {
        conditioner: &conditioner,
        content: &content,
        styles: &styles,
    };
    let guidance = GuidanceConfig {
        steps_stage1: 4,
        steps_stage2: 4,
        ..GuidanceConfig::default()
    };
    let runs = intensity_sweep(
        &backbone,
        inputs,
        &guidance,
        &PipelineOptions::default(),
        SEED,
        &[0, 5, 32],
    )
    .unwrap();
    assert_eq!(runs.iter().map(|r| r.k).collect::<Vec<_>>(), [0, 5, 32]);
    for run in &runs {
        let plan = run.outcome.final_pass().plan;
        assert_eq!(plan.stage1.k(32), run.k);
        assert_eq!(plan.stage2.k(32), run.k);
    }
    let too_big = intensity_sweep(&backbone, inputs, &guidance, &PipelineOptions::default(), SEED, &[33]);
    assert!(matches!(too_big, Err(SculptError::Config(_))));
}

#[test]
fn a_plan_that_needs_style_without_style_images_is_a_config_error() {
    let backbone = ci_backbone();
    let conditioner = conditioner_for(&backbone);
    let content = content_image();
    let err = run_with_inputs(
        &backbone,
        RunInputs {
            conditioner: &conditioner,
            content: &content,
            styles: &[],
        },
        &ci_guidance(GuidanceMode::Dual),
        &PipelineOptions::default(),
        SEED,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

/// Emits NaN for one branch at one step of one stage.
struct Poisoned<B> {
    inner: B,
    stage: Stage,
    step: usize,
    branch: Branch,
}

impl<B: Backbone> Backbone for Poisoned<B> {
    fn channels(&self) -> usize {
        self.inner.channels()
    }
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }
    fn condition_dim(&self) -> usize {
        self.inner.condition_dim()
    }
    fn declared_site_count(&self) -> usize {
        self.inner.declared_site_count()
    }
    fn attention_sites(&self) -> Vec<AttentionSite<'_>> {
        self.inner.attention_sites()
    }
    fn velocity(
        &self,
        stage: Stage,
        step: usize,
        t: f64,
        pass: CfgPass,
        inputs: &BranchSet<BranchInput<'_>>,
        hook: &mut dyn SiteHook,
    ) -> sculpt::Result<BranchSet<Matrix>> {
        let mut v = self.inner.velocity(stage, step, t, pass, inputs, hook)?;
        if stage == self.stage && step == self.step {
            if let Some(m) = v.get_mut(self.branch) {
                m[[0, 0]] = f64::NAN;
            }
        }
        Ok(v)
    }
    fn occupancy(&self, latent: &DenseLatent) -> sculpt::Result<Array1<f64>> {
        self.inner.occupancy(latent)
    }
    fn voxel_colors(&self, latent: &SparseLatent) -> sculpt::Result<Matrix> {
        self.inner.voxel_colors(latent)
    }
}

#[test]
fn non_finite_velocity_aborts_with_its_location() {
    let backbone = Poisoned {
        inner: ci_backbone(),
        stage: Stage::Latent,
        step: 3,
        branch: Branch::Style,
    };
    let conditioner = conditioner_for(&backbone);
    let (content, styles) = (content_image(), vec![style_image()]);
    let err = run_with_inputs(
        &backbone,
        RunInputs {
            conditioner: &conditioner,
            content: &content,
            styles: &styles,
        },
        &ci_guidance(GuidanceMode::Dual),
        &PipelineOptions::default(),
        SEED,
    )
    .unwrap_err();
    assert!(matches!(err.root(), SculptError::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    let msg = err.to_string();
    assert!(
        msg.contains("pass 1") && msg.contains("stage 2") && msg.contains("step 3"),
        "{msg}"
    );
}

/// Voxel-set overlap between the first-pass asset and the second pass's
/// decoded structure. Printed for inspection; the exact-equality check lives
/// in the ignored test below.
fn geometry_carryover() -> (BTreeSet<[u32; 3]>, BTreeSet<[u32; 3]>) {
    let backbone = ci_backbone();
    let conditioner = conditioner_for(&backbone);
    let (content, styles) = (content_image(), vec![style_image()]);
    let outcome = run_with_inputs(
        &backbone,
        RunInputs {
            conditioner: &conditioner,
            content: &content,
            styles: &styles,
        },
        &ci_guidance(GuidanceMode::GeometryOnly),
        &PipelineOptions::default(),
        SEED,
    )
    .unwrap();
    let first: BTreeSet<_> = outcome.assets[0].voxels.iter().copied().collect();
    let second: BTreeSet<_> = outcome.passes[1].voxels.content.iter().copied().collect();
    (first, second)
}

#[test]
fn geometry_carryover_overlap_report() {
    let (first, second) = geometry_carryover();
    let inter = first.intersection(&second).count();
    let union = first.union(&second).count();
    println!(
        "pass-1 voxels {}, pass-2 decoded voxels {}, IoU {:.3}",
        first.len(),
        second.len(),
        inter as f64 / union as f64
    );
    assert!(!first.is_empty() && !second.is_empty());
}

#[test]
#[ignore = "the untrained toy backbone does not reconstruct geometry from a rendered view"]
fn geometry_carryover_is_exact() {
    let (first, second) = geometry_carryover();
    assert_eq!(first, second);
}
