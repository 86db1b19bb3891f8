//! Style-disentangled feature selection.
//!
//! Channels whose edge-branch attention output barely varies across patches
//! are treated as style-significant; those channels take the content→style
//! cross-attention result while the rest keep the content-preserve
//! self-attention result.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Zip};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_3d_attention, qkv_project, self_attention, QkvWeights};
use crate::error::{Result, SculptError};
use crate::tensor::{ensure_finite, seeded_rng, Matrix};

/// How the `k` masked channels are picked from a variance vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// The `k` smallest variances (the method's default).
    #[default]
    LowVariance,
    /// The `k` largest variances.
    HighVariance,
    /// `k` channels drawn uniformly from a seeded generator.
    Random,
}

impl SelectionPolicy {
    pub const ALL: [SelectionPolicy; 3] = [
        SelectionPolicy::Random,
        SelectionPolicy::HighVariance,
        SelectionPolicy::LowVariance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionPolicy::LowVariance => "low_variance",
            SelectionPolicy::HighVariance => "high_variance",
            SelectionPolicy::Random => "random",
        }
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionPolicy {
    type Err = SculptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" | "low_variance" | "low-variance" => Ok(Self::LowVariance),
            "high" | "high_variance" | "high-variance" => Ok(Self::HighVariance),
            "random" => Ok(Self::Random),
            other => Err(SculptError::config(format!(
                "unknown channel-selection policy {other:?} (expected random, high or low)"
            ))),
        }
    }
}

/// Binary style-aware channel mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    bits: Vec<bool>,
    k: usize,
    policy: SelectionPolicy,
}

impl ChannelMask {
    pub fn none(channels: usize) -> Self {
        Self {
            bits: vec![false; channels],
            k: 0,
            policy: SelectionPolicy::LowVariance,
        }
    }

    pub fn all(channels: usize) -> Self {
        Self {
            bits: vec![true; channels],
            k: channels,
            policy: SelectionPolicy::LowVariance,
        }
    }

    pub fn from_indices(channels: usize, selected: &[usize], policy: SelectionPolicy) -> Result<Self> {
        let mut bits = vec![false; channels];
        for &c in selected {
            if c >= channels {
                return Err(SculptError::contract(format!(
                    "channel {c} out of range for {channels} channels"
                )));
            }
            bits[c] = true;
        }
        let k = bits.iter().filter(|b| **b).count();
        Ok(Self { bits, k, policy })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn policy(&self) -> SelectionPolicy {
        self.policy
    }

    /// Selected channel indices in ascending order.
    pub fn selected(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }
}

/// The branch features seen at one attention site.
#[derive(Debug, Clone)]
pub struct BranchFeatures {
    pub content: Matrix,
    pub style: Matrix,
    pub edge: Matrix,
    pub preserve: Matrix,
}

impl BranchFeatures {
    pub fn validate(&self) -> Result<()> {
        let c = self.content.ncols();
        for (name, m) in [
            ("style", &self.style),
            ("edge", &self.edge),
            ("content-preserve", &self.preserve),
        ] {
            if m.ncols() != c {
                return Err(SculptError::contract(format!(
                    "{name} features have {} channels, content has {c}",
                    m.ncols()
                )));
            }
        }
        if self.preserve.nrows() != self.content.nrows() {
            return Err(SculptError::contract(format!(
                "content-preserve has {} rows, content has {}",
                self.preserve.nrows(),
                self.content.nrows()
            )));
        }
        for (name, m) in [
            ("content", &self.content),
            ("style", &self.style),
            ("edge", &self.edge),
            ("content-preserve", &self.preserve),
        ] {
            ensure_finite(m.view(), name)?;
        }
        Ok(())
    }
}

/// Population variance of every channel across rows.
pub fn channel_variance(features: &Matrix) -> Result<Array1<f64>> {
    let n = features.nrows();
    if n == 0 {
        return Err(SculptError::contract("channel variance of zero patches"));
    }
    ensure_finite(features.view(), "variance input")?;
    // Single pass shifted by the first row: the shift keeps the
    // sum-of-squares cancellation small without a separate mean pass.
    let shift = features.row(0).to_owned();
    let mut sum = Array1::<f64>::zeros(features.ncols());
    let mut sum_sq = Array1::<f64>::zeros(features.ncols());
    for row in features.rows() {
        Zip::from(&mut sum)
            .and(&mut sum_sq)
            .and(&row)
            .and(&shift)
            .for_each(|s, sq, &x, &k| {
                let d = x - k;
                *s += d;
                *sq += d * d;
            });
    }
    let n = n as f64;
    Ok(Zip::from(&sum)
        .and(&sum_sq)
        .map_collect(|&s, &sq| ((sq - s * s / n) / n).max(0.0)))
}

/// Builds a mask of exactly `k` ones. Ties go to the lower channel index.
///
/// `random_seed` only matters for [`SelectionPolicy::Random`].
pub fn build_style_mask(
    variances: &Array1<f64>,
    k: usize,
    policy: SelectionPolicy,
    random_seed: u64,
) -> Result<ChannelMask> {
    let channels = variances.len();
    if k > channels {
        return Err(SculptError::contract(format!(
            "k = {k} exceeds the {channels} available channels"
        )));
    }
    if variances.iter().any(|v| !v.is_finite()) {
        return Err(SculptError::numeric("non-finite channel variance"));
    }

    let selected: Vec<usize> = match policy {
        SelectionPolicy::LowVariance | SelectionPolicy::HighVariance => {
            let mut order: Vec<usize> = (0..channels).collect();
            // sort_by is stable, so equal variances keep ascending index order
            if policy == SelectionPolicy::LowVariance {
                order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]));
            } else {
                order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]));
            }
            order.truncate(k);
            order
        }
        SelectionPolicy::Random => {
            let mut rng = seeded_rng(random_seed, 0x6d61_736b);
            index::sample(&mut rng, channels, k).into_vec()
        }
    };

    ChannelMask::from_indices(channels, &selected, policy)
}

/// Value-identical, independently owned copy of the content features.
pub fn content_preserve_copy(content: &Matrix) -> Matrix {
    content.to_owned()
}

/// Masked channels from `cross`, the complement from `preserve`. Pure
/// selection: every output column is a bitwise copy of one source column.
pub fn splice_channels(cross: &Matrix, preserve: &Matrix, mask: &ChannelMask) -> Result<Matrix> {
    if cross.dim() != preserve.dim() {
        return Err(SculptError::contract(format!(
            "cross output {:?} and content-preserve output {:?} differ in shape",
            cross.dim(),
            preserve.dim()
        )));
    }
    if mask.len() != cross.ncols() {
        return Err(SculptError::contract(format!(
            "mask has {} channels, features have {}",
            mask.len(),
            cross.ncols()
        )));
    }
    let mut out = preserve.clone();
    for (c, &bit) in mask.bits().iter().enumerate() {
        if bit {
            out.column_mut(c).assign(&cross.column(c));
        }
    }
    Ok(out)
}

/// Style-disentangled attention at one site:
/// masked channels from content→style cross-attention, the rest from the
/// content-preserve branch's self-attention.
pub fn sd_attention(branches: &BranchFeatures, mask: &ChannelMask, weights: &QkvWeights) -> Result<Matrix> {
    branches.validate()?;
    let content = qkv_project(&branches.content, weights)?;
    let style = qkv_project(&branches.style, weights)?;
    let preserve = qkv_project(&branches.preserve, weights)?;
    let cross = cross_3d_attention(&content.query, &style.key, &style.value, weights.heads)?;
    let kept = self_attention(&preserve)?;
    splice_channels(&cross, &kept, mask)
}

/// Variance vector of the edge branch's self-attention output at a site.
pub fn edge_filter_variances(edge: &Matrix, weights: &QkvWeights) -> Result<Array1<f64>> {
    let attended = self_attention(&qkv_project(edge, weights)?)?;
    channel_variance(&attended)
}
