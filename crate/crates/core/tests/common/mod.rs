#![allow(dead_code)]

use std::sync::Mutex;

use ndarray::Array1;
use sculpt::attention::QkvWeights;
use sculpt::backbone::{Backbone, BranchInput, DenseLatent, Latent, SparseLatent, ToyBackbone, ToyConfig};
use sculpt::branch::{Branch, BranchSet};
use sculpt::conditioning::{Conditioner, ConditioningConfig, ImageInput};
use sculpt::hooks::{AttentionSite, CfgPass, SiteCall, SiteHook, SiteId, Stage};
use sculpt::sgc::{GuidanceConfig, GuidanceMode};
use sculpt::synthetic::object_image;
use sculpt::tensor::{layer_norm, seeded_rng, standard_normal, Matrix};
use sculpt::Result;

/// Small enough for the whole suite to run in minutes on one core.
pub const CI_STEPS: usize = 20;

pub fn ci_config() -> ToyConfig {
    ToyConfig {
        resolution: 4,
        ..ToyConfig::default()
    }
}

pub fn ci_backbone() -> ToyBackbone {
    ToyBackbone::from_seed(ci_config()).unwrap()
}

pub fn ci_guidance(mode: GuidanceMode) -> GuidanceConfig {
    GuidanceConfig {
        mode,
        steps_stage1: CI_STEPS,
        steps_stage2: CI_STEPS,
        ..GuidanceConfig::default()
    }
}

pub fn conditioner_for(backbone: &dyn Backbone) -> Conditioner {
    Conditioner::new(ConditioningConfig::default(), backbone.condition_dim()).unwrap()
}

pub fn content_image() -> ImageInput {
    object_image(11, 96, 96).unwrap()
}

pub fn style_image() -> ImageInput {
    object_image(12, 120, 100).unwrap()
}

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    standard_normal(&mut seeded_rng(seed, 0), rows, cols)
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A host unrelated to the toy transformer: a different channel width,
/// three structure sites and five latent sites, residual attention only.
pub struct MockHost {
    pub channels: usize,
    pub resolution: usize,
    pub condition_dim: usize,
    structure: Vec<(QkvWeights, Matrix)>,
    latent: Vec<(QkvWeights, Matrix)>,
    condition_in: Matrix,
}

impl MockHost {
    pub const STRUCTURE_SITES: usize = 3;
    pub const LATENT_SITES: usize = 5;

    pub fn new(seed: u64) -> Self {
        let (c, heads) = (16, 2);
        let mut rng = seeded_rng(seed, 9);
        let mut site = || {
            let w = |rng: &mut _| standard_normal(rng, c, c) * (1.0 / (c as f64).sqrt());
            let qkv = QkvWeights {
                query: w(&mut rng),
                key: w(&mut rng),
                value: w(&mut rng),
                heads,
            };
            (qkv, w(&mut rng) * 0.5)
        };
        let structure = (0..Self::STRUCTURE_SITES).map(|_| site()).collect();
        let latent = (0..Self::LATENT_SITES).map(|_| site()).collect();
        let condition_dim = 24;
        let condition_in = standard_normal(&mut rng, condition_dim, c) * 0.2;
        Self {
            channels: c,
            resolution: 3,
            condition_dim,
            structure,
            latent,
            condition_in,
        }
    }

    fn sites(&self, stage: Stage) -> &[(QkvWeights, Matrix)] {
        match stage {
            Stage::Structure => &self.structure,
            Stage::Latent => &self.latent,
        }
    }
}

impl Backbone for MockHost {
    fn channels(&self) -> usize {
        self.channels
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    fn declared_site_count(&self) -> usize {
        Self::STRUCTURE_SITES + Self::LATENT_SITES
    }

    fn attention_sites(&self) -> Vec<AttentionSite<'_>> {
        [Stage::Structure, Stage::Latent]
            .into_iter()
            .flat_map(|stage| {
                self.sites(stage)
                    .iter()
                    .enumerate()
                    .map(move |(i, (w, _))| AttentionSite {
                        id: SiteId::new(stage, i),
                        weights: w,
                    })
            })
            .collect()
    }

    fn velocity(
        &self,
        stage: Stage,
        step: usize,
        t: f64,
        pass: CfgPass,
        inputs: &BranchSet<BranchInput<'_>>,
        hook: &mut dyn SiteHook,
    ) -> Result<BranchSet<Matrix>> {
        let mut x = inputs.as_ref().map(|_, input| {
            let bias: Array1<f64> = input
                .condition
                .mean_axis(ndarray::Axis(0))
                .unwrap()
                .dot(&self.condition_in);
            let mut h = input.features.clone();
            h += &(bias * t);
            h
        });
        for (i, (_, out)) in self.sites(stage).iter().enumerate() {
            let hidden = x.as_ref().map(|_, h| layer_norm(h));
            let attended = hook.attend(SiteCall {
                site: SiteId::new(stage, i),
                step,
                pass,
                hidden: &hidden,
            })?;
            x = x.map(|branch, mut h| {
                h += &attended.get(branch).expect("hook keeps every branch").dot(out);
                h
            });
        }
        Ok(x.map(|_, h| h * 0.5))
    }

    fn occupancy(&self, latent: &DenseLatent) -> Result<Array1<f64>> {
        let f = latent.features();
        Ok((&f.column(0) - &f.column(1)).mapv(|v| 1.0 / (1.0 + (-v).exp())))
    }

    fn voxel_colors(&self, latent: &SparseLatent) -> Result<Matrix> {
        Ok(latent
            .features()
            .slice(ndarray::s![.., 0..3])
            .mapv(|v| 1.0 / (1.0 + (-v).exp())))
    }
}

/// What a branch looked like when it first entered the network in a stage.
#[derive(Debug, Clone)]
pub struct FirstInput {
    pub stage: Stage,
    pub branch: Branch,
    pub coords: Vec<[u32; 3]>,
    pub features: Matrix,
}

/// Delegates to `inner` and records every branch's features at step 0 of
/// the conditional pass.
pub struct Recording<B> {
    pub inner: B,
    pub seen: Mutex<Vec<FirstInput>>,
}

impl<B> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn first(&self, stage: Stage, branch: Branch) -> Option<FirstInput> {
        self.seen
            .lock()
            .unwrap()
            .iter()
            .find(|r| r.stage == stage && r.branch == branch)
            .cloned()
    }
}

impl<B: Backbone> Backbone for Recording<B> {
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
    ) -> Result<BranchSet<Matrix>> {
        if step == 0 && pass == CfgPass::Conditional {
            let mut seen = self.seen.lock().unwrap();
            for (branch, input) in inputs.iter() {
                seen.push(FirstInput {
                    stage,
                    branch,
                    coords: input.coords.to_vec(),
                    features: input.features.clone(),
                });
            }
        }
        self.inner.velocity(stage, step, t, pass, inputs, hook)
    }

    fn occupancy(&self, latent: &DenseLatent) -> Result<Array1<f64>> {
        self.inner.occupancy(latent)
    }

    fn voxel_colors(&self, latent: &SparseLatent) -> Result<Matrix> {
        self.inner.voxel_colors(latent)
    }
}
