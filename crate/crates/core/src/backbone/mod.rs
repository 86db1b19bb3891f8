//! Two-stage rectified-flow substrate: latents, the time schedule, the Euler
//! update, classifier-free guidance, and the host interface every backbone
//! (the bundled toy model or an adapter) implements.

mod sampler;
mod toy;
pub mod weights;

use ndarray::Array1;

pub use sampler::{sample_stage1, sample_stage2, SamplerOptions};
pub use toy::{ToyBackbone, ToyConfig, VelocityModel};

use crate::branch::BranchSet;
use crate::error::{Result, SculptError};
use crate::hooks::{AttentionSite, CfgPass, SiteHook, Stage};
use crate::tensor::{ensure_finite, sigmoid, Matrix};

/// Integer voxel / patch coordinate `(x, y, z)`.
pub type Coord = [u32; 3];

/// Tolerance for a timestep that lands marginally below zero.
const TIME_EPS: f64 = 1e-9;

/// All `R³` grid coordinates in x-major order (`index = (x·R + y)·R + z`).
pub fn grid_coords(resolution: usize) -> Vec<Coord> {
    let r = resolution as u32;
    let mut out = Vec::with_capacity(resolution.pow(3));
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                out.push([x, y, z]);
            }
        }
    }
    out
}

pub fn grid_index(coord: Coord, resolution: usize) -> usize {
    let r = resolution;
    (coord[0] as usize * r + coord[1] as usize) * r + coord[2] as usize
}

/// Common surface of dense and sparse latents.
pub trait Latent: Clone {
    fn features(&self) -> &Matrix;
    fn features_mut(&mut self) -> &mut Matrix;
    fn timestep(&self) -> f64;
    fn set_timestep(&mut self, t: f64);
    /// Coordinates of every feature row.
    fn token_coords(&self) -> Vec<Coord>;
}

/// Stage-1 latent: features for every patch of an `R³` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLatent {
    resolution: usize,
    features: Matrix,
    timestep: f64,
}

impl DenseLatent {
    pub fn new(resolution: usize, features: Matrix, timestep: f64) -> Result<Self> {
        if features.nrows() != resolution.pow(3) {
            return Err(SculptError::contract(format!(
                "dense latent at resolution {resolution} needs {} rows, got {}",
                resolution.pow(3),
                features.nrows()
            )));
        }
        check_timestep(timestep)?;
        ensure_finite(features.view(), "dense latent")?;
        Ok(Self {
            resolution,
            features,
            timestep,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }
}

impl Latent for DenseLatent {
    fn features(&self) -> &Matrix {
        &self.features
    }

    fn features_mut(&mut self) -> &mut Matrix {
        &mut self.features
    }

    fn timestep(&self) -> f64 {
        self.timestep
    }

    fn set_timestep(&mut self, t: f64) {
        self.timestep = t;
    }

    fn token_coords(&self) -> Vec<Coord> {
        grid_coords(self.resolution)
    }
}

/// Stage-2 latent: one feature row per active voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLatent {
    resolution: usize,
    coords: Vec<Coord>,
    features: Matrix,
    timestep: f64,
}

impl SparseLatent {
    pub fn new(resolution: usize, coords: Vec<Coord>, features: Matrix, timestep: f64) -> Result<Self> {
        validate_voxels(&coords, resolution)?;
        if features.nrows() != coords.len() {
            return Err(SculptError::contract(format!(
                "{} voxels but {} feature rows",
                coords.len(),
                features.nrows()
            )));
        }
        check_timestep(timestep)?;
        ensure_finite(features.view(), "sparse latent")?;
        Ok(Self {
            resolution,
            coords,
            features,
            timestep,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

impl Latent for SparseLatent {
    fn features(&self) -> &Matrix {
        &self.features
    }

    fn features_mut(&mut self) -> &mut Matrix {
        &mut self.features
    }

    fn timestep(&self) -> f64 {
        self.timestep
    }

    fn set_timestep(&mut self, t: f64) {
        self.timestep = t;
    }

    fn token_coords(&self) -> Vec<Coord> {
        self.coords.clone()
    }
}

fn check_timestep(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(SculptError::contract(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Non-empty, unique, in-bounds voxel set.
pub fn validate_voxels(coords: &[Coord], resolution: usize) -> Result<()> {
    if coords.is_empty() {
        return Err(SculptError::contract("a sparse latent needs at least one voxel"));
    }
    let mut seen = vec![false; resolution.pow(3)];
    for &c in coords {
        if c.iter().any(|&v| v as usize >= resolution) {
            return Err(SculptError::contract(format!(
                "voxel {c:?} outside a {resolution}³ grid"
            )));
        }
        let i = grid_index(c, resolution);
        if std::mem::replace(&mut seen[i], true) {
            return Err(SculptError::contract(format!("voxel {c:?} appears twice")));
        }
    }
    Ok(())
}

/// Uniform descending schedule `1 = t₀ > t₁ > … > t_n = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSchedule {
    timesteps: Vec<f64>,
}

impl TimeSchedule {
    pub fn new(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(SculptError::contract("a schedule needs at least one step"));
        }
        let n = num_steps as f64;
        let timesteps = (0..=num_steps).map(|i| (num_steps - i) as f64 / n).collect();
        Ok(Self { timesteps })
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// Nominal `Δt = 1 / num_steps`.
    pub fn step_size(&self) -> f64 {
        1.0 / self.num_steps() as f64
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    /// `(t, Δt)` for every step, where `Δt` lands exactly on the next timestep.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.timesteps.windows(2).map(|w| (w[0], w[0] - w[1]))
    }
}

/// `x_{t−Δt} = x_t − v·Δt`.
pub fn euler_step<L: Latent>(latent: &L, velocity: &Matrix, dt: f64) -> Result<L> {
    if velocity.dim() != latent.features().dim() {
        return Err(SculptError::contract(format!(
            "velocity shape {:?} does not match latent shape {:?}",
            velocity.dim(),
            latent.features().dim()
        )));
    }
    if dt.is_nan() || dt <= 0.0 {
        return Err(SculptError::contract(format!("step size {dt} must be positive")));
    }
    let next_t = latent.timestep() - dt;
    if next_t < -TIME_EPS {
        return Err(SculptError::contract(format!(
            "step of {dt} from t = {} overshoots zero",
            latent.timestep()
        )));
    }
    ensure_finite(velocity.view(), "velocity")?;
    let mut out = latent.clone();
    out.features_mut().scaled_add(-dt, velocity);
    out.set_timestep(next_t.max(0.0));
    Ok(out)
}

/// `v_uncond + scale·(v_cond − v_uncond)`; returns `v_cond` unchanged at scale 1.
pub fn cfg_velocity(v_cond: &Matrix, v_uncond: &Matrix, scale: f64) -> Result<Matrix> {
    if v_cond.dim() != v_uncond.dim() {
        return Err(SculptError::contract(format!(
            "conditional {:?} and unconditional {:?} velocities differ in shape",
            v_cond.dim(),
            v_uncond.dim()
        )));
    }
    if scale.is_nan() || scale < 0.0 {
        return Err(SculptError::contract(format!("guidance scale {scale} must be ≥ 0")));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    let mut out = v_cond - v_uncond;
    out *= scale;
    out += v_uncond;
    Ok(out)
}

/// Per-branch inputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BranchInput<'a> {
    pub features: &'a Matrix,
    pub coords: &'a [Coord],
    pub condition: &'a Matrix,
}

/// A two-stage flow backbone with hookable self-attention.
pub trait Backbone: Sync {
    /// Latent channel count `C`, shared by both stages.
    fn channels(&self) -> usize;
    /// Grid resolution `R` of the sparse structure.
    fn resolution(&self) -> usize;
    fn condition_dim(&self) -> usize;
    /// Number of self-attention sites promised by the backbone's configuration.
    fn declared_site_count(&self) -> usize;
    /// Every self-attention site of both stages, with its projection weights.
    fn attention_sites(&self) -> Vec<AttentionSite<'_>>;
    /// Velocities for every branch in `inputs`, advancing all branches
    /// through the network together so each hooked site sees them at once.
    fn velocity(
        &self,
        stage: Stage,
        step: usize,
        t: f64,
        pass: CfgPass,
        inputs: &BranchSet<BranchInput<'_>>,
        hook: &mut dyn SiteHook,
    ) -> Result<BranchSet<Matrix>>;
    /// Occupancy probability in `[0, 1]` for every patch of a stage-1 latent.
    fn occupancy(&self, latent: &DenseLatent) -> Result<Array1<f64>>;
    /// RGB in `[0, 1]` for every voxel of a stage-2 latent.
    fn voxel_colors(&self, latent: &SparseLatent) -> Result<Matrix>;
}

/// Voxels whose occupancy exceeds `threshold`, in grid order. Never empty:
/// if nothing passes, the single highest-scoring patch is kept.
pub fn decode_sparse_structure<B: Backbone + ?Sized>(
    backbone: &B,
    latent: &DenseLatent,
    threshold: f64,
) -> Result<Vec<Coord>> {
    if latent.timestep() != 0.0 {
        return Err(SculptError::contract(format!(
            "decoding needs a fully denoised latent, got t = {}",
            latent.timestep()
        )));
    }
    let scores = backbone.occupancy(latent)?;
    Ok(select_occupied(&scores, latent.resolution(), threshold))
}

pub(crate) fn select_occupied(scores: &Array1<f64>, resolution: usize, threshold: f64) -> Vec<Coord> {
    let coords = grid_coords(resolution);
    let kept: Vec<Coord> = coords
        .iter()
        .zip(scores.iter())
        .filter(|(_, &s)| s > threshold)
        .map(|(c, _)| *c)
        .collect();
    if !kept.is_empty() {
        return kept;
    }
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if *s > scores[best] { i } else { best });
    vec![coords[best]]
}

/// Linear readout followed by a sigmoid, applied per row.
pub(crate) fn sigmoid_readout(features: &Matrix, weights: &Matrix, bias: &Array1<f64>) -> Matrix {
    let mut out = features.dot(weights);
    for mut row in out.rows_mut() {
        row += bias;
        row.mapv_inplace(sigmoid);
    }
    out
}
