//! Structured sparsity sets (filter, channel, kernel) and their Euclidean
//! projections.
//!
//! Each set bounds how many groups of a layer may contain a nonzero weight.
//! Projection keeps the `budget` groups with the largest squared Frobenius
//! norm verbatim and zeroes the others. Ties at the budget boundary go to the
//! smaller group index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerShape, WeightTensor4D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Filter,
    Channel,
    Kernel,
}

impl GroupKind {
    pub const ALL: [GroupKind; 3] = [GroupKind::Filter, GroupKind::Channel, GroupKind::Kernel];

    pub fn group_count(self, shape: &LayerShape) -> usize {
        match self {
            GroupKind::Filter => shape.filters,
            GroupKind::Channel => shape.channels,
            GroupKind::Kernel => shape.filters * shape.channels,
        }
    }

    /// Group that the kernel `(f, c)` belongs to.
    fn group_of(self, shape: &LayerShape, f: usize, c: usize) -> usize {
        match self {
            GroupKind::Filter => f,
            GroupKind::Channel => c,
            GroupKind::Kernel => f * shape.channels + c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparsityConstraint {
    pub kind: GroupKind,
    budget: usize,
}

impl SparsityConstraint {
    pub fn new(kind: GroupKind, budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::Config(format!(
                "{kind:?} budget must be at least 1; remove the layer instead of pruning it entirely"
            )));
        }
        Ok(SparsityConstraint { kind, budget })
    }

    pub fn filter(budget: usize) -> Result<Self> {
        Self::new(GroupKind::Filter, budget)
    }

    pub fn channel(budget: usize) -> Result<Self> {
        Self::new(GroupKind::Channel, budget)
    }

    pub fn kernel(budget: usize) -> Result<Self> {
        Self::new(GroupKind::Kernel, budget)
    }

    /// Budget from a keep ratio in (0, 1], rounded up.
    pub fn from_ratio(kind: GroupKind, keep_ratio: f64, shape: &LayerShape) -> Result<Self> {
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(Error::Config(format!("keep_ratio must be in (0, 1], got {keep_ratio}")));
        }
        let groups = kind.group_count(shape);
        let budget = ((keep_ratio * groups as f64).ceil() as usize).clamp(1, groups);
        Self::new(kind, budget)
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn check(&self, shape: &LayerShape) -> Result<()> {
        let groups = self.kind.group_count(shape);
        if self.budget > groups {
            return Err(Error::Config(format!(
                "{:?} budget {} exceeds the {} available groups",
                self.kind, self.budget, groups
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupIndex {
    Filter(usize),
    Channel(usize),
    Kernel(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: GroupIndex,
    /// Squared Frobenius norm of the group slice.
    pub score: f64,
}

fn raw_scores(w: &WeightTensor4D, kind: GroupKind) -> Vec<f64> {
    let shape = *w.shape();
    let mut scores = vec![0.0; kind.group_count(&shape)];
    for f in 0..shape.filters {
        for c in 0..shape.channels {
            let sq: f64 = w.kernel(f, c).iter().map(|v| v * v).sum();
            scores[kind.group_of(&shape, f, c)] += sq;
        }
    }
    scores
}

pub fn group_scores(w: &WeightTensor4D, kind: GroupKind) -> Vec<GroupScore> {
    let channels = w.shape().channels;
    raw_scores(w, kind)
        .into_iter()
        .enumerate()
        .map(|(i, score)| GroupScore {
            group: match kind {
                GroupKind::Filter => GroupIndex::Filter(i),
                GroupKind::Channel => GroupIndex::Channel(i),
                GroupKind::Kernel => GroupIndex::Kernel(i / channels, i % channels),
            },
            score,
        })
        .collect()
}

/// Number of groups of `kind` holding at least one nonzero weight.
pub fn nonzero_groups(w: &WeightTensor4D, kind: GroupKind) -> usize {
    match kind {
        GroupKind::Filter => w.nonzero_filters(),
        GroupKind::Channel => w.nonzero_channels(),
        GroupKind::Kernel => w.nonzero_kernels(),
    }
}

pub fn is_feasible(w: &WeightTensor4D, c: &SparsityConstraint) -> Result<bool> {
    c.check(w.shape())?;
    Ok(nonzero_groups(w, c.kind) <= c.budget)
}

/// Per-group keep flags: true for the `budget` highest-scoring groups.
pub fn kept_groups(w: &WeightTensor4D, c: &SparsityConstraint) -> Result<Vec<bool>> {
    c.check(w.shape())?;
    let scores = raw_scores(w, c.kind);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // descending score, ascending index on ties
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut keep = vec![false; scores.len()];
    for &g in order.iter().take(c.budget) {
        keep[g] = true;
    }
    Ok(keep)
}

/// Element-level keep mask (row-major like the weights) for one constraint.
pub fn keep_mask(w: &WeightTensor4D, c: &SparsityConstraint) -> Result<Vec<bool>> {
    let groups = kept_groups(w, c)?;
    let shape = *w.shape();
    let k = shape.kernel_len();
    let mut mask = Vec::with_capacity(shape.len());
    for f in 0..shape.filters {
        for ch in 0..shape.channels {
            let keep = groups[c.kind.group_of(&shape, f, ch)];
            mask.extend(std::iter::repeat_n(keep, k));
        }
    }
    Ok(mask)
}

/// Euclidean projection of `w` onto the constraint set.
pub fn project(w: &WeightTensor4D, c: &SparsityConstraint) -> Result<WeightTensor4D> {
    let mask = keep_mask(w, c)?;
    let mut out = w.clone();
    apply_mask(&mut out, &mask);
    Ok(out)
}

pub fn apply_mask(w: &mut WeightTensor4D, mask: &[bool]) {
    debug_assert_eq!(mask.len(), w.values().len());
    for (v, &keep) in w.values_mut().iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
}

/// Intersection of the independent per-constraint keep masks of `w`.
pub fn combined_mask(w: &WeightTensor4D, constraints: &[SparsityConstraint]) -> Result<Vec<bool>> {
    let mut mask = vec![true; w.values().len()];
    for c in constraints {
        for (m, k) in mask.iter_mut().zip(keep_mask(w, c)?) {
            *m &= k;
        }
    }
    Ok(mask)
}
