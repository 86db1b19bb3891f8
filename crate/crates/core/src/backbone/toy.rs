//! Desk-scale reference backbone.
//!
//! Each stage is a small pre-norm transformer over latent tokens:
//! hooked self-attention, cross-attention to the condition tokens, and a GELU
//! feed-forward layer per block. Only the self-attention is routed through the
//! hook; everything else is the host's own computation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use super::weights::WeightArchive;
use super::{sigmoid_readout, Backbone, BranchInput, Coord, DenseLatent, SparseLatent};
use crate::attention::{multi_head_attention, QkvWeights};
use crate::branch::BranchSet;
use crate::error::{Result, SculptError};
use crate::hooks::{AttentionSite, CfgPass, SiteCall, SiteHook, SiteId, Stage};
use crate::tensor::{add_row, gelu, layer_norm, mix_seed, scaled_normal, seeded_rng, Matrix};

const POS_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
const POS_FEATURES: usize = 3 * 2 * POS_FREQS.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Patches per grid axis `R`.
    pub resolution: usize,
    /// Latent channels `C`.
    pub channels: usize,
    pub heads: usize,
    /// Transformer blocks per stage.
    pub depth: usize,
    pub condition_dim: usize,
    /// Hidden width multiplier of the feed-forward layer.
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            resolution: 8,
            channels: 32,
            heads: 4,
            depth: 4,
            condition_dim: 32,
            ffn_mult: 2,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("channels", self.channels),
            ("heads", self.heads),
            ("depth", self.depth),
            ("condition_dim", self.condition_dim),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SculptError::config(format!("toy backbone {name} must be ≥ 1")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(SculptError::config(format!(
                "{} channels are not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    fn ffn_width(&self) -> usize {
        self.channels * self.ffn_mult
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Gaussian scaled by `gain / sqrt(fan_in)`.
    Fan(f64),
    Zero,
}

/// Shape and initialisation of every named tensor, in archive order.
fn tensor_layout(config: &ToyConfig) -> Vec<(String, usize, usize, Init)> {
    let c = config.channels;
    let d = config.condition_dim;
    let f = config.ffn_width();
    let mut out = Vec::new();
    for stage in ["stage1", "stage2"] {
        out.push((format!("{stage}.time"), c, c, Init::Fan(1.0)));
        out.push((format!("{stage}.pos"), POS_FEATURES, c, Init::Fan(1.0)));
        for b in 0..config.depth {
            let p = format!("{stage}.block{b}");
            for n in ["attn.q", "attn.k", "attn.v"] {
                out.push((format!("{p}.{n}"), c, c, Init::Fan(1.0)));
            }
            out.push((format!("{p}.attn.out"), c, c, Init::Fan(0.5)));
            out.push((format!("{p}.cond.q"), c, c, Init::Fan(1.0)));
            out.push((format!("{p}.cond.k"), d, c, Init::Fan(1.0)));
            out.push((format!("{p}.cond.v"), d, c, Init::Fan(1.0)));
            out.push((format!("{p}.cond.out"), c, c, Init::Fan(1.0)));
            out.push((format!("{p}.ffn.in"), c, f, Init::Fan(1.0)));
            out.push((format!("{p}.ffn.in_bias"), 1, f, Init::Zero));
            out.push((format!("{p}.ffn.out"), f, c, Init::Fan(0.5)));
            out.push((format!("{p}.ffn.out_bias"), 1, c, Init::Zero));
        }
        out.push((format!("{stage}.out"), c, c, Init::Fan(1.0)));
    }
    out.push(("decoder.occupancy".into(), c, 1, Init::Fan(1.0)));
    out.push(("decoder.occupancy_bias".into(), 1, 1, Init::Zero));
    out.push(("decoder.color".into(), c, 3, Init::Fan(1.0)));
    out.push(("decoder.color_bias".into(), 1, 3, Init::Zero));
    out
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone)]
struct ConditionAttention {
    query: Matrix,
    key: Matrix,
    value: Matrix,
    out: Matrix,
}

#[derive(Debug, Clone)]
struct Block {
    attn: QkvWeights,
    attn_out: Matrix,
    cond: ConditionAttention,
    ffn_in: Matrix,
    ffn_in_bias: Array1<f64>,
    ffn_out: Matrix,
    ffn_out_bias: Array1<f64>,
}

/// One stage's flow transformer.
#[derive(Debug, Clone)]
pub struct VelocityModel {
    stage: Stage,
    resolution: usize,
    heads: usize,
    time: Matrix,
    pos: Matrix,
    blocks: Vec<Block>,
    out: Matrix,
}

impl VelocityModel {
    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn site(&self, index: usize) -> SiteId {
        SiteId::new(self.stage, index)
    }

    fn time_embedding(&self, t: f64) -> Array1<f64> {
        let c = self.time.nrows();
        let half = c / 2;
        let mut emb = Array1::zeros(c);
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            let arg = 1000.0 * t * freq;
            emb[2 * j] = arg.sin();
            emb[2 * j + 1] = arg.cos();
        }
        emb.dot(&self.time)
    }

    fn position_embedding(&self, coords: &[Coord]) -> Matrix {
        let r = self.resolution as f64;
        let mut feats = Matrix::zeros((coords.len(), POS_FEATURES));
        for (row, c) in feats.rows_mut().into_iter().zip(coords) {
            let mut row = row;
            let mut k = 0;
            for &axis in c {
                let u = (axis as f64 + 0.5) / r;
                for f in POS_FREQS {
                    row[k] = (PI * f * u).sin();
                    row[k + 1] = (PI * f * u).cos();
                    k += 2;
                }
            }
        }
        feats.dot(&self.pos)
    }

    /// Lock-step forward over every branch in `inputs`.
    pub fn forward(
        &self,
        step: usize,
        t: f64,
        pass: CfgPass,
        inputs: &BranchSet<BranchInput<'_>>,
        hook: &mut dyn SiteHook,
    ) -> Result<BranchSet<Matrix>> {
        let channels = self.out.nrows();
        let time = self.time_embedding(t);
        let mut x = inputs.as_ref().try_map(|branch, input| {
            if input.features.ncols() != channels || input.features.nrows() != input.coords.len() {
                return Err(SculptError::contract(format!(
                    "{branch} branch features {:?} do not match {} coordinates × {channels} channels",
                    input.features.dim(),
                    input.coords.len()
                )));
            }
            let mut h = input.features + &self.position_embedding(input.coords);
            add_row(&mut h, &time);
            Ok(h)
        })?;

        for (i, block) in self.blocks.iter().enumerate() {
            let hidden = x.as_ref().map(|_, h| layer_norm(h));
            let attended = hook.attend(SiteCall {
                site: self.site(i),
                step,
                pass,
                hidden: &hidden,
            })?;
            x = x.try_map(|branch, mut h| {
                let a = attended
                    .get(branch)
                    .ok_or_else(|| SculptError::contract(format!("hook dropped the {branch} branch")))?;
                h += &a.dot(&block.attn_out);

                let condition = inputs.get(branch).expect("same branch set").condition;
                let n = layer_norm(&h);
                let cross = multi_head_attention(
                    &n.dot(&block.cond.query),
                    &condition.dot(&block.cond.key),
                    &condition.dot(&block.cond.value),
                    self.heads,
                )?;
                h += &cross.dot(&block.cond.out);

                let n = layer_norm(&h);
                let mut inner = n.dot(&block.ffn_in);
                add_row(&mut inner, &block.ffn_in_bias);
                inner.mapv_inplace(gelu);
                let mut ffn = inner.dot(&block.ffn_out);
                add_row(&mut ffn, &block.ffn_out_bias);
                h += &ffn;
                Ok::<_, SculptError>(h)
            })?;
        }

        Ok(x.map(|_, h| layer_norm(&h).dot(&self.out)))
    }
}

/// Both stage transformers plus the structure and color readouts.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: ToyConfig,
    structure: VelocityModel,
    latent: VelocityModel,
    occupancy: Matrix,
    occupancy_bias: Array1<f64>,
    color: Matrix,
    color_bias: Array1<f64>,
}

impl ToyBackbone {
    /// Weights drawn from `config.seed`; one generator stream per tensor name.
    pub fn from_seed(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        Self::assemble(config, |name, rows, cols, init| match init {
            Init::Zero => Ok(Matrix::zeros((rows, cols))),
            Init::Fan(gain) => {
                let mut rng = seeded_rng(mix_seed(&[seed, name_stream(name)]), 0);
                Ok(scaled_normal(&mut rng, rows, cols) * gain)
            }
        })
    }

    /// Every parameter zero: the velocity is identically zero.
    pub fn zeroed(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        Self::assemble(config, |_, rows, cols, _| Ok(Matrix::zeros((rows, cols))))
    }

    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let config: ToyConfig = serde_json::from_value(archive.hyperparameters.clone())
            .map_err(|e| SculptError::config(format!("weight manifest hyperparameters: {e}")))?;
        config.validate()?;
        let tensors: BTreeMap<&str, &Matrix> = archive.tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let expected = tensor_layout(&config).len();
        if tensors.len() != expected {
            return Err(SculptError::config(format!(
                "weight archive has {} tensors, the configuration needs {expected}",
                tensors.len()
            )));
        }
        Self::assemble(config, |name, rows, cols, _| {
            let m = tensors
                .get(name)
                .ok_or_else(|| SculptError::config(format!("weight archive is missing {name}")))?;
            if m.dim() != (rows, cols) {
                return Err(SculptError::config(format!(
                    "{name} has shape {:?}, expected ({rows}, {cols})",
                    m.dim()
                )));
            }
            Ok((*m).clone())
        })
    }

    pub fn to_archive(&self) -> WeightArchive {
        let mut tensors = Vec::new();
        let mut push = |name: String, m: &Matrix| tensors.push((name, m.clone()));
        for (stage, model) in [("stage1", &self.structure), ("stage2", &self.latent)] {
            push(format!("{stage}.time"), &model.time);
            push(format!("{stage}.pos"), &model.pos);
            for (b, block) in model.blocks.iter().enumerate() {
                let p = format!("{stage}.block{b}");
                push(format!("{p}.attn.q"), &block.attn.query);
                push(format!("{p}.attn.k"), &block.attn.key);
                push(format!("{p}.attn.v"), &block.attn.value);
                push(format!("{p}.attn.out"), &block.attn_out);
                push(format!("{p}.cond.q"), &block.cond.query);
                push(format!("{p}.cond.k"), &block.cond.key);
                push(format!("{p}.cond.v"), &block.cond.value);
                push(format!("{p}.cond.out"), &block.cond.out);
                push(format!("{p}.ffn.in"), &block.ffn_in);
                push(
                    format!("{p}.ffn.in_bias"),
                    &block.ffn_in_bias.clone().insert_axis(Axis(0)),
                );
                push(format!("{p}.ffn.out"), &block.ffn_out);
                push(
                    format!("{p}.ffn.out_bias"),
                    &block.ffn_out_bias.clone().insert_axis(Axis(0)),
                );
            }
            push(format!("{stage}.out"), &model.out);
        }
        push("decoder.occupancy".into(), &self.occupancy);
        push(
            "decoder.occupancy_bias".into(),
            &self.occupancy_bias.clone().insert_axis(Axis(0)),
        );
        push("decoder.color".into(), &self.color);
        push(
            "decoder.color_bias".into(),
            &self.color_bias.clone().insert_axis(Axis(0)),
        );
        WeightArchive {
            seed: self.config.seed,
            hyperparameters: serde_json::to_value(&self.config).expect("config serializes"),
            tensors,
        }
    }

    fn assemble(config: ToyConfig, mut source: impl FnMut(&str, usize, usize, Init) -> Result<Matrix>) -> Result<Self> {
        let mut table: BTreeMap<String, Matrix> = BTreeMap::new();
        for (name, rows, cols, init) in tensor_layout(&config) {
            let m = source(&name, rows, cols, init)?;
            table.insert(name, m);
        }
        let mut take = |name: String| table.remove(&name).expect("layout entry");
        let mut model = |stage: Stage, prefix: &str| {
            let time = take(format!("{prefix}.time"));
            let pos = take(format!("{prefix}.pos"));
            let blocks = (0..config.depth)
                .map(|b| {
                    let p = format!("{prefix}.block{b}");
                    Block {
                        attn: QkvWeights {
                            query: take(format!("{p}.attn.q")),
                            key: take(format!("{p}.attn.k")),
                            value: take(format!("{p}.attn.v")),
                            heads: config.heads,
                        },
                        attn_out: take(format!("{p}.attn.out")),
                        cond: ConditionAttention {
                            query: take(format!("{p}.cond.q")),
                            key: take(format!("{p}.cond.k")),
                            value: take(format!("{p}.cond.v")),
                            out: take(format!("{p}.cond.out")),
                        },
                        ffn_in: take(format!("{p}.ffn.in")),
                        ffn_in_bias: take(format!("{p}.ffn.in_bias")).row(0).to_owned(),
                        ffn_out: take(format!("{p}.ffn.out")),
                        ffn_out_bias: take(format!("{p}.ffn.out_bias")).row(0).to_owned(),
                    }
                })
                .collect();
            VelocityModel {
                stage,
                resolution: config.resolution,
                heads: config.heads,
                time,
                pos,
                blocks,
                out: take(format!("{prefix}.out")),
            }
        };
        let structure = model(Stage::Structure, "stage1");
        let latent = model(Stage::Latent, "stage2");
        Ok(Self {
            structure,
            latent,
            occupancy: take("decoder.occupancy".into()),
            occupancy_bias: take("decoder.occupancy_bias".into()).row(0).to_owned(),
            color: take("decoder.color".into()),
            color_bias: take("decoder.color_bias".into()).row(0).to_owned(),
            config,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn model(&self, stage: Stage) -> &VelocityModel {
        match stage {
            Stage::Structure => &self.structure,
            Stage::Latent => &self.latent,
        }
    }

    /// Occupancy readout weights `[C, 1]` and bias.
    pub fn occupancy_readout(&self) -> (&Matrix, &Array1<f64>) {
        (&self.occupancy, &self.occupancy_bias)
    }

    /// Color readout weights `[C, 3]` and bias.
    pub fn color_readout(&self) -> (&Matrix, &Array1<f64>) {
        (&self.color, &self.color_bias)
    }
}

impl Backbone for ToyBackbone {
    fn channels(&self) -> usize {
        self.config.channels
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn condition_dim(&self) -> usize {
        self.config.condition_dim
    }

    fn declared_site_count(&self) -> usize {
        2 * self.config.depth
    }

    fn attention_sites(&self) -> Vec<AttentionSite<'_>> {
        [&self.structure, &self.latent]
            .into_iter()
            .flat_map(|m| {
                m.blocks.iter().enumerate().map(|(i, b)| AttentionSite {
                    id: m.site(i),
                    weights: &b.attn,
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
        self.model(stage).forward(step, t, pass, inputs, hook)
    }

    fn occupancy(&self, latent: &DenseLatent) -> Result<Array1<f64>> {
        use super::Latent;
        if latent.channels() != self.config.channels {
            return Err(SculptError::contract(
                "latent channel count does not match the backbone",
            ));
        }
        Ok(
            sigmoid_readout(latent.features(), &self.occupancy, &self.occupancy_bias)
                .column(0)
                .to_owned(),
        )
    }

    fn voxel_colors(&self, latent: &SparseLatent) -> Result<Matrix> {
        use super::Latent;
        if latent.features().ncols() != self.config.channels {
            return Err(SculptError::contract(
                "latent channel count does not match the backbone",
            ));
        }
        Ok(sigmoid_readout(latent.features(), &self.color, &self.color_bias))
    }
}
