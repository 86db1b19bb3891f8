//! Self-attention hook protocol.
//!
//! A host backbone enumerates its self-attention sites and, during every
//! forward pass, hands each site's layer-normed branch features to a
//! [`SiteHook`]. The hook returns the head-concatenated attention output per
//! branch; the host applies its own output projection and keeps every other
//! layer untouched.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{cross_3d_attention, qkv_project, self_attention, AttentionTensors, QkvWeights};
use crate::branch::{Branch, BranchSet};
use crate::error::{Result, SculptError};
use crate::sdfs::{build_style_mask, channel_variance, splice_channels, ChannelMask, SelectionPolicy};
use crate::tensor::{mix_seed, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Dense sparse-structure stage.
    Structure,
    /// Sparse per-voxel latent stage.
    Latent,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Structure => 1,
            Stage::Latent => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub stage: Stage,
    pub index: usize,
}

impl SiteId {
    pub fn new(stage: Stage, index: usize) -> Self {
        Self { stage, index }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}.attn{}", self.stage.number(), self.index)
    }
}

/// Which half of a classifier-free guidance pair is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CfgPass {
    Conditional,
    Unconditional,
}

/// A self-attention site as exposed by a host.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSite<'w> {
    pub id: SiteId,
    pub weights: &'w QkvWeights,
}

/// What a host passes to the hook at one site.
#[derive(Debug, Clone, Copy)]
pub struct SiteCall<'a> {
    pub site: SiteId,
    pub step: usize,
    pub pass: CfgPass,
    pub hidden: &'a BranchSet<Matrix>,
}

pub trait SiteHook {
    fn attend(&mut self, call: SiteCall<'_>) -> Result<BranchSet<Matrix>>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCounters {
    pub calls: u64,
    pub self_attention: u64,
    pub cross_attention: u64,
}

impl SiteCounters {
    fn add(&mut self, other: &SiteCounters) {
        self.calls += other.calls;
        self.self_attention += other.self_attention;
        self.cross_attention += other.cross_attention;
    }
}

/// Everything a processor sees at one site invocation.
#[derive(Debug, Clone, Copy)]
pub struct SiteContext<'a> {
    pub site: SiteId,
    pub step: usize,
    pub pass: CfgPass,
    pub hidden: &'a BranchSet<Matrix>,
    pub weights: &'a QkvWeights,
}

/// Computes per-branch attention outputs for one site invocation.
pub trait AttentionProcessor {
    fn process(&mut self, ctx: SiteContext<'_>, counters: &mut SiteCounters) -> Result<BranchSet<Matrix>>;
}

/// The host's original behaviour: self-attention on every branch.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainAttention;

impl AttentionProcessor for PlainAttention {
    fn process(&mut self, ctx: SiteContext<'_>, counters: &mut SiteCounters) -> Result<BranchSet<Matrix>> {
        plain_outputs(&ctx, counters)
    }
}

fn plain_outputs(ctx: &SiteContext<'_>, counters: &mut SiteCounters) -> Result<BranchSet<Matrix>> {
    ctx.hidden.as_ref().try_map(|_, h| {
        counters.self_attention += 1;
        self_attention(&qkv_project(h, ctx.weights)?)
    })
}

/// What the content branch's self-attention becomes during one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StageAttention {
    /// Unmodified self-attention.
    SelfOnly,
    /// Cross-attention on `k` selected channels, content-preserve on the rest.
    Disentangled { k: usize, policy: SelectionPolicy },
    /// Cross-attention on every channel.
    FullCross,
}

impl StageAttention {
    /// True when the content branch reads from the style branch.
    pub fn uses_style(&self) -> bool {
        !matches!(self, StageAttention::SelfOnly)
    }

    /// True when the edge and content-preserve branches must run.
    pub fn needs_selection(&self) -> bool {
        matches!(self, StageAttention::Disentangled { .. })
    }

    /// Number of style channels: 0 for plain attention, all for full cross.
    pub fn k(&self, channels: usize) -> usize {
        match *self {
            StageAttention::SelfOnly => 0,
            StageAttention::Disentangled { k, .. } => k,
            StageAttention::FullCross => channels,
        }
    }
}

/// One line of the per-step mask trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskTraceEntry {
    pub pass: usize,
    pub stage: u8,
    pub step: usize,
    pub site: usize,
    pub k: usize,
    pub policy: SelectionPolicy,
    pub channels: Vec<usize>,
}

/// Style-guided attention for a whole run: per-stage behaviour plus the
/// run-local state (frozen masks, mask trace).
#[derive(Debug, Clone)]
pub struct StyleProcessor {
    structure: StageAttention,
    latent: StageAttention,
    selection_seed: u64,
    pass: usize,
    freeze_mask: bool,
    frozen: BTreeMap<SiteId, ChannelMask>,
    trace: Vec<MaskTraceEntry>,
}

impl StyleProcessor {
    pub fn new(structure: StageAttention, latent: StageAttention, selection_seed: u64) -> Self {
        Self {
            structure,
            latent,
            selection_seed,
            pass: 1,
            freeze_mask: false,
            frozen: BTreeMap::new(),
            trace: Vec::new(),
        }
    }

    /// Reuse the first mask computed at each site for every later step.
    pub fn with_frozen_mask(mut self, freeze: bool) -> Self {
        self.freeze_mask = freeze;
        self
    }

    pub fn with_pass(mut self, pass: usize) -> Self {
        self.pass = pass;
        self
    }

    pub fn stage_attention(&self, stage: Stage) -> StageAttention {
        match stage {
            Stage::Structure => self.structure,
            Stage::Latent => self.latent,
        }
    }

    pub fn trace(&self) -> &[MaskTraceEntry] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<MaskTraceEntry> {
        self.trace
    }

    fn mask_for(
        &mut self,
        ctx: &SiteContext<'_>,
        k: usize,
        policy: SelectionPolicy,
        edge_attended: &Matrix,
    ) -> Result<ChannelMask> {
        if self.freeze_mask {
            if let Some(mask) = self.frozen.get(&ctx.site) {
                return Ok(mask.clone());
            }
        }
        let variances = channel_variance(edge_attended)?;
        let seed = mix_seed(&[
            self.selection_seed,
            self.pass as u64,
            ctx.site.stage.number() as u64,
            ctx.site.index as u64,
            ctx.step as u64,
        ]);
        let mask = build_style_mask(&variances, k, policy, seed)?;
        if self.freeze_mask {
            self.frozen.insert(ctx.site, mask.clone());
        }
        Ok(mask)
    }
}

fn required(hidden: &BranchSet<Matrix>, branch: Branch, site: SiteId) -> Result<&Matrix> {
    hidden
        .get(branch)
        .ok_or_else(|| SculptError::contract(format!("site {site} needs the {branch} branch but it is not running")))
}

impl AttentionProcessor for StyleProcessor {
    fn process(&mut self, ctx: SiteContext<'_>, counters: &mut SiteCounters) -> Result<BranchSet<Matrix>> {
        let mode = self.stage_attention(ctx.site.stage);
        // The unconditional half of CFG always runs the host's own attention.
        if ctx.pass == CfgPass::Unconditional || !mode.uses_style() {
            return plain_outputs(&ctx, counters);
        }

        let heads = ctx.weights.heads;
        let project = |m: &Matrix| qkv_project(m, ctx.weights);
        let attend = |t: &AttentionTensors, counters: &mut SiteCounters| {
            counters.self_attention += 1;
            self_attention(t)
        };

        let content = project(&ctx.hidden.content)?;
        let style = project(required(ctx.hidden, Branch::Style, ctx.site)?)?;
        let style_out = attend(&style, counters)?;
        counters.cross_attention += 1;
        let cross = cross_3d_attention(&content.query, &style.key, &style.value, heads)?;

        let preserve_out = ctx
            .hidden
            .preserve
            .as_ref()
            .map(|h| attend(&project(h)?, counters))
            .transpose()?;
        let edge_out = ctx
            .hidden
            .edge
            .as_ref()
            .map(|h| attend(&project(h)?, counters))
            .transpose()?;

        let content_out = match mode {
            StageAttention::FullCross => cross,
            StageAttention::Disentangled { k, policy } => {
                let edge_attended = edge_out
                    .as_ref()
                    .ok_or_else(|| SculptError::contract(format!("site {} needs the edge branch", ctx.site)))?;
                let kept = preserve_out.as_ref().ok_or_else(|| {
                    SculptError::contract(format!("site {} needs the content-preserve branch", ctx.site))
                })?;
                let mask = self.mask_for(&ctx, k, policy, edge_attended)?;
                self.trace.push(MaskTraceEntry {
                    pass: self.pass,
                    stage: ctx.site.stage.number(),
                    step: ctx.step,
                    site: ctx.site.index,
                    k,
                    policy,
                    channels: mask.selected(),
                });
                splice_channels(&cross, kept, &mask)?
            }
            StageAttention::SelfOnly => unreachable!("handled above"),
        };

        Ok(BranchSet {
            content: content_out,
            preserve: preserve_out,
            style: Some(style_out),
            edge: edge_out,
        })
    }
}

/// Bound hook table for one run: every host site bound exactly once, with
/// per-site invocation counters.
#[derive(Debug)]
pub struct HookProtocol<'w, P> {
    bindings: BTreeMap<SiteId, &'w QkvWeights>,
    counters: BTreeMap<SiteId, SiteCounters>,
    processor: P,
}

/// Binds `processor` to every site of `surface`.
///
/// `declared_sites` is the site count the backbone's configuration promises;
/// an enumeration that disagrees is a configuration error, as is a site id
/// that appears twice.
pub fn install_hooks<'w, P: AttentionProcessor>(
    surface: Vec<AttentionSite<'w>>,
    declared_sites: usize,
    processor: P,
) -> Result<HookProtocol<'w, P>> {
    if surface.len() != declared_sites {
        return Err(SculptError::config(format!(
            "host exposes {} self-attention sites but its configuration declares {declared_sites}",
            surface.len()
        )));
    }
    let mut bindings = BTreeMap::new();
    for site in surface {
        site.weights.validate()?;
        if bindings.insert(site.id, site.weights).is_some() {
            return Err(SculptError::config(format!("site {} is bound twice", site.id)));
        }
    }
    let counters = bindings.keys().map(|id| (*id, SiteCounters::default())).collect();
    Ok(HookProtocol {
        bindings,
        counters,
        processor,
    })
}

impl<'w, P> HookProtocol<'w, P> {
    pub fn bound_sites(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.bindings.keys().copied()
    }

    pub fn counters(&self) -> &BTreeMap<SiteId, SiteCounters> {
        &self.counters
    }

    pub fn totals(&self) -> SiteCounters {
        self.totals_where(|_| true)
    }

    pub fn stage_totals(&self, stage: Stage) -> SiteCounters {
        self.totals_where(|id| id.stage == stage)
    }

    fn totals_where(&self, keep: impl Fn(&SiteId) -> bool) -> SiteCounters {
        let mut total = SiteCounters::default();
        for (_, c) in self.counters.iter().filter(|(id, _)| keep(id)) {
            total.add(c);
        }
        total
    }

    pub fn processor(&self) -> &P {
        &self.processor
    }

    pub fn into_parts(self) -> (P, BTreeMap<SiteId, SiteCounters>) {
        (self.processor, self.counters)
    }
}

impl<P: AttentionProcessor> SiteHook for HookProtocol<'_, P> {
    fn attend(&mut self, call: SiteCall<'_>) -> Result<BranchSet<Matrix>> {
        let weights = *self
            .bindings
            .get(&call.site)
            .ok_or_else(|| SculptError::config(format!("host called unbound site {}", call.site)))?;
        let counters = self.counters.get_mut(&call.site).expect("counter per binding");
        counters.calls += 1;
        let out = self.processor.process(
            SiteContext {
                site: call.site,
                step: call.step,
                pass: call.pass,
                hidden: call.hidden,
                weights,
            },
            counters,
        )?;
        for (branch, h) in call.hidden.iter() {
            match out.get(branch) {
                Some(o) if o.dim() == h.dim() => {}
                Some(o) => {
                    return Err(SculptError::contract(format!(
                        "site {} returned {:?} for the {branch} branch, expected {:?}",
                        call.site,
                        o.dim(),
                        h.dim()
                    )))
                }
                None => {
                    return Err(SculptError::contract(format!(
                        "site {} dropped the {branch} branch",
                        call.site
                    )))
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, standard_normal};

    fn weights(seed: u64, c: usize) -> QkvWeights {
        let mut rng = seeded_rng(seed, 0);
        QkvWeights {
            query: standard_normal(&mut rng, c, c) * 0.3,
            key: standard_normal(&mut rng, c, c) * 0.3,
            value: standard_normal(&mut rng, c, c) * 0.3,
            heads: 2,
        }
    }

    #[test]
    fn doubly_bound_and_miscounted_surfaces_are_rejected() {
        let w = weights(1, 8);
        let site = |i| AttentionSite {
            id: SiteId::new(Stage::Structure, i),
            weights: &w,
        };
        let dup = install_hooks(vec![site(0), site(0)], 2, PlainAttention).unwrap_err();
        assert!(dup.to_string().contains("bound twice"), "{dup}");
        let short = install_hooks(vec![site(0)], 2, PlainAttention).unwrap_err();
        assert!(matches!(short, SculptError::Config(_)));
    }

    #[test]
    fn unbound_site_call_fails() {
        let w = weights(1, 8);
        let mut hooks = install_hooks(
            vec![AttentionSite {
                id: SiteId::new(Stage::Structure, 0),
                weights: &w,
            }],
            1,
            PlainAttention,
        )
        .unwrap();
        let hidden = BranchSet::content_only(Matrix::zeros((3, 8)));
        let err = hooks
            .attend(SiteCall {
                site: SiteId::new(Stage::Latent, 0),
                step: 0,
                pass: CfgPass::Conditional,
                hidden: &hidden,
            })
            .unwrap_err();
        assert!(err.to_string().contains("unbound"), "{err}");
    }

    #[test]
    fn style_processor_counts_one_cross_call_per_conditional_site() {
        let w = weights(2, 8);
        let mut rng = seeded_rng(3, 0);
        let h = standard_normal(&mut rng, 5, 8);
        let hidden = BranchSet {
            content: h.clone(),
            preserve: Some(h),
            style: Some(standard_normal(&mut rng, 7, 8)),
            edge: Some(standard_normal(&mut rng, 7, 8)),
        };
        let mode = StageAttention::Disentangled {
            k: 3,
            policy: SelectionPolicy::LowVariance,
        };
        let mut hooks = install_hooks(
            vec![AttentionSite {
                id: SiteId::new(Stage::Structure, 0),
                weights: &w,
            }],
            1,
            StyleProcessor::new(mode, StageAttention::SelfOnly, 0),
        )
        .unwrap();
        for pass in [CfgPass::Conditional, CfgPass::Unconditional] {
            hooks
                .attend(SiteCall {
                    site: SiteId::new(Stage::Structure, 0),
                    step: 0,
                    pass,
                    hidden: &hidden,
                })
                .unwrap();
        }
        let totals = hooks.totals();
        assert_eq!(totals.calls, 2);
        assert_eq!(totals.cross_attention, 1);
        assert_eq!(totals.self_attention, 3 + 4);
        assert_eq!(hooks.processor().trace().len(), 1);
        assert_eq!(hooks.processor().trace()[0].channels.len(), 3);
    }

    #[test]
    fn frozen_mask_is_reused_across_steps() {
        let w = weights(4, 8);
        let mut rng = seeded_rng(5, 0);
        let mode = StageAttention::Disentangled {
            k: 4,
            policy: SelectionPolicy::LowVariance,
        };
        let mut proc = StyleProcessor::new(mode, mode, 0).with_frozen_mask(true);
        let mut counters = SiteCounters::default();
        let mut masks = Vec::new();
        for step in 0..3 {
            let h = standard_normal(&mut rng, 6, 8);
            let hidden = BranchSet {
                content: h.clone(),
                preserve: Some(h),
                style: Some(standard_normal(&mut rng, 6, 8)),
                edge: Some(standard_normal(&mut rng, 6, 8)),
            };
            proc.process(
                SiteContext {
                    site: SiteId::new(Stage::Latent, 1),
                    step,
                    pass: CfgPass::Conditional,
                    hidden: &hidden,
                    weights: &w,
                },
                &mut counters,
            )
            .unwrap();
            masks.push(proc.trace().last().unwrap().channels.clone());
        }
        assert!(masks.windows(2).all(|p| p[0] == p[1]));
    }
}
