use super::{cfg_velocity, euler_step, Backbone, BranchInput, Coord, DenseLatent, Latent, SparseLatent, TimeSchedule};
use crate::branch::{Branch, BranchSet};
use crate::conditioning::ConditionEmbedding;
use crate::error::{Result, SculptError};
use crate::hooks::{CfgPass, SiteHook, Stage};
use crate::sdfs::content_preserve_copy;
use crate::tensor::{ensure_finite, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    pub cfg_scale: f64,
    /// Run the content-preserve branch (a fresh copy of the content latent
    /// at every step) alongside the others.
    pub preserve: bool,
}

impl SamplerOptions {
    pub fn new(cfg_scale: f64) -> Self {
        Self {
            cfg_scale,
            preserve: false,
        }
    }

    pub fn with_preserve(mut self, preserve: bool) -> Self {
        self.preserve = preserve;
        self
    }
}

/// Denoises every branch of a stage-1 grid latent from t = 1 to t = 0 in
/// lock-step.
pub fn sample_stage1<B: Backbone + ?Sized>(
    backbone: &B,
    conditions: &BranchSet<ConditionEmbedding>,
    noise: BranchSet<DenseLatent>,
    schedule: &TimeSchedule,
    options: SamplerOptions,
    hook: &mut dyn SiteHook,
) -> Result<BranchSet<DenseLatent>> {
    for (branch, latent) in noise.iter() {
        if latent.resolution() != backbone.resolution() {
            return Err(SculptError::contract(format!(
                "{branch} noise has resolution {}, backbone uses {}",
                latent.resolution(),
                backbone.resolution()
            )));
        }
    }
    run(backbone, Stage::Structure, conditions, noise, schedule, options, hook)
}

/// Denoises per-voxel latents. Each branch's noise rows must line up with
/// its voxel list; rows are never reordered.
pub fn sample_stage2<B: Backbone + ?Sized>(
    backbone: &B,
    conditions: &BranchSet<ConditionEmbedding>,
    voxels: &BranchSet<Vec<Coord>>,
    noise: BranchSet<SparseLatent>,
    schedule: &TimeSchedule,
    options: SamplerOptions,
    hook: &mut dyn SiteHook,
) -> Result<BranchSet<SparseLatent>> {
    for (branch, latent) in noise.iter() {
        let expected = voxels
            .get(branch)
            .ok_or_else(|| SculptError::contract(format!("no voxel set for the {branch} branch")))?;
        if latent.coords() != expected.as_slice() {
            return Err(SculptError::contract(format!(
                "{branch} noise rows are not aligned with its {} voxels",
                expected.len()
            )));
        }
    }
    run(backbone, Stage::Latent, conditions, noise, schedule, options, hook)
}

fn run<B: Backbone + ?Sized, L: Latent>(
    backbone: &B,
    stage: Stage,
    conditions: &BranchSet<ConditionEmbedding>,
    mut latents: BranchSet<L>,
    schedule: &TimeSchedule,
    options: SamplerOptions,
    hook: &mut dyn SiteHook,
) -> Result<BranchSet<L>> {
    if latents.preserve.is_some() {
        return Err(SculptError::contract(
            "the content-preserve branch is derived per step, not passed as noise",
        ));
    }
    if latents.branches() != conditions.branches() {
        return Err(SculptError::contract(format!(
            "noise branches {:?} do not match condition branches {:?}",
            latents.branches(),
            conditions.branches()
        )));
    }
    for (branch, cond) in conditions.iter() {
        if cond.tokens.ncols() != backbone.condition_dim() {
            return Err(SculptError::contract(format!(
                "{branch} condition has dimension {}, backbone expects {}",
                cond.tokens.ncols(),
                backbone.condition_dim()
            )));
        }
    }
    for (branch, latent) in latents.iter() {
        if latent.timestep() != 1.0 {
            return Err(SculptError::contract(format!(
                "{branch} noise must start at t = 1, got {}",
                latent.timestep()
            )));
        }
    }

    let coords = latents.as_ref().map(|_, l| l.token_coords());
    let tokens = conditions.as_ref().map(|_, c| &c.tokens);
    let null = conditions.as_ref().map(|_, c| Matrix::zeros(c.tokens.dim()));
    let timesteps = schedule.timesteps();

    for (step, (t, dt)) in schedule.steps().enumerate() {
        let preserve = options
            .preserve
            .then(|| content_preserve_copy(latents.content.features()));
        let at = |e: SculptError| e.at_step(stage, step, None);

        let cond_inputs = branch_inputs(&latents, &coords, &tokens, preserve.as_ref());
        let mut v_cond = backbone
            .velocity(stage, step, t, CfgPass::Conditional, &cond_inputs, hook)
            .map_err(at)?;
        for (branch, v) in v_cond.iter() {
            ensure_finite(v.view(), "velocity").map_err(|e| e.at_step(stage, step, Some(branch)))?;
        }
        v_cond.preserve = None;

        let velocities = if options.cfg_scale == 1.0 {
            v_cond
        } else {
            let uncond_inputs = branch_inputs(&latents, &coords, &null.as_ref(), None);
            let v_uncond = backbone
                .velocity(stage, step, t, CfgPass::Unconditional, &uncond_inputs, hook)
                .map_err(at)?;
            v_cond.try_map(|branch, v| {
                let u = v_uncond
                    .get(branch)
                    .ok_or_else(|| SculptError::contract(format!("no unconditional {branch} velocity")))
                    .map_err(at)?;
                cfg_velocity(&v, u, options.cfg_scale).map_err(|e| e.at_step(stage, step, Some(branch)))
            })?
        };

        latents = latents.try_map(|branch, latent| {
            let v = velocities.get(branch).expect("velocity per latent");
            let mut next = euler_step(&latent, v, dt).map_err(|e| e.at_step(stage, step, Some(branch)))?;
            next.set_timestep(timesteps[step + 1]);
            ensure_finite(next.features().view(), "latent").map_err(|e| e.at_step(stage, step, Some(branch)))?;
            Ok::<_, SculptError>(next)
        })?;
    }
    Ok(latents)
}

fn branch_inputs<'a, L: Latent>(
    latents: &'a BranchSet<L>,
    coords: &'a BranchSet<Vec<Coord>>,
    conditions: &BranchSet<&'a Matrix>,
    preserve: Option<&'a Matrix>,
) -> BranchSet<BranchInput<'a>> {
    let input = |branch: Branch, features: &'a Matrix| BranchInput {
        features,
        coords: coords.get(branch).expect("coords per latent"),
        condition: conditions.get(branch).expect("condition per latent"),
    };
    BranchSet {
        content: input(Branch::Content, latents.content.features()),
        preserve: preserve.map(|f| BranchInput {
            features: f,
            coords: &coords.content,
            condition: conditions.content,
        }),
        style: latents.style.as_ref().map(|l| input(Branch::Style, l.features())),
        edge: latents.edge.as_ref().map(|l| input(Branch::Edge, l.features())),
    }
}
