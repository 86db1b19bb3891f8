//! The four lock-stepped denoising streams.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// The stream that becomes the output asset.
    Content,
    /// Per-step copy of the content stream that only ever sees self-attention.
    Preserve,
    /// Generation from the style image.
    Style,
    /// Generation from the style image's edge map.
    Edge,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Content, Branch::Preserve, Branch::Style, Branch::Edge];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Content => "content",
            Branch::Preserve => "content-preserve",
            Branch::Style => "style",
            Branch::Edge => "edge",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per active branch. The content branch is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet<T> {
    pub content: T,
    pub preserve: Option<T>,
    pub style: Option<T>,
    pub edge: Option<T>,
}

impl<T> BranchSet<T> {
    pub fn content_only(content: T) -> Self {
        Self {
            content,
            preserve: None,
            style: None,
            edge: None,
        }
    }

    pub fn get(&self, branch: Branch) -> Option<&T> {
        match branch {
            Branch::Content => Some(&self.content),
            Branch::Preserve => self.preserve.as_ref(),
            Branch::Style => self.style.as_ref(),
            Branch::Edge => self.edge.as_ref(),
        }
    }

    pub fn get_mut(&mut self, branch: Branch) -> Option<&mut T> {
        match branch {
            Branch::Content => Some(&mut self.content),
            Branch::Preserve => self.preserve.as_mut(),
            Branch::Style => self.style.as_mut(),
            Branch::Edge => self.edge.as_mut(),
        }
    }

    pub fn is_active(&self, branch: Branch) -> bool {
        self.get(branch).is_some()
    }

    /// Active branches in canonical order.
    pub fn branches(&self) -> Vec<Branch> {
        Branch::ALL.into_iter().filter(|b| self.is_active(*b)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Branch, &T)> {
        Branch::ALL.into_iter().filter_map(move |b| self.get(b).map(|v| (b, v)))
    }

    pub fn as_ref(&self) -> BranchSet<&T> {
        BranchSet {
            content: &self.content,
            preserve: self.preserve.as_ref(),
            style: self.style.as_ref(),
            edge: self.edge.as_ref(),
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(Branch, T) -> U) -> BranchSet<U> {
        BranchSet {
            content: f(Branch::Content, self.content),
            preserve: self.preserve.map(|v| f(Branch::Preserve, v)),
            style: self.style.map(|v| f(Branch::Style, v)),
            edge: self.edge.map(|v| f(Branch::Edge, v)),
        }
    }

    pub fn try_map<U, E>(self, mut f: impl FnMut(Branch, T) -> Result<U, E>) -> Result<BranchSet<U>, E> {
        Ok(BranchSet {
            content: f(Branch::Content, self.content)?,
            preserve: self.preserve.map(|v| f(Branch::Preserve, v)).transpose()?,
            style: self.style.map(|v| f(Branch::Style, v)).transpose()?,
            edge: self.edge.map(|v| f(Branch::Edge, v)).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_follows_canonical_order() {
        let set = BranchSet {
            content: 1,
            preserve: None,
            style: Some(3),
            edge: Some(4),
        };
        let seen: Vec<_> = set.iter().map(|(b, v)| (b, *v)).collect();
        assert_eq!(seen, vec![(Branch::Content, 1), (Branch::Style, 3), (Branch::Edge, 4)]);
        assert_eq!(set.map(|_, v| v * 2).style, Some(6));
    }
}
