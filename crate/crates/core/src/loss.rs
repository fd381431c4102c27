//! Negative log-likelihood objectives and keypoint grouping.
//!
//! [`full_nll_loss`] scores every keypoint of a person under one joint
//! density. [`group_nll_loss`] splits the keypoints into equal groups, scores
//! each group as its own lower-dimensional mixture (the coefficients are
//! shared) and averages over groups. Redrawing the grouping every iteration
//! with [`sample_partition`] lets all keypoint pairs be related over the
//! course of training while each factor stays far from underflow.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::density::{mixture_log_likelihood, underflow_ratio, ComponentKind, DimSelection};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::types::{GroupPartition, KeypointSet, MixtureField, PersonAnnotation, SkeletonSpec};

/// How keypoints are grouped for the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GroupingMode {
    /// A fresh uniformly random partition every iteration.
    #[default]
    Random,
    /// The skeleton's fixed preset grouping.
    Heuristic,
    /// One group holding every keypoint.
    None,
}

impl GroupingMode {
    pub fn name(self) -> &'static str {
        match self {
            GroupingMode::Random => "random",
            GroupingMode::Heuristic => "heuristic",
            GroupingMode::None => "none",
        }
    }
}

impl fmt::Display for GroupingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroupingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(GroupingMode::Random),
            "heuristic" => Ok(GroupingMode::Heuristic),
            "none" => Ok(GroupingMode::None),
            other => Err(Error::Parse(format!("unknown grouping mode `{other}`"))),
        }
    }
}

/// Where the per-group mixture likelihood is accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LikelihoodSpace {
    /// Log-sum-exp over component log terms.
    #[default]
    Log,
    /// Single-precision products of linear densities; can underflow.
    LinearSingle,
}

impl LikelihoodSpace {
    pub fn name(self) -> &'static str {
        match self {
            LikelihoodSpace::Log => "log",
            LikelihoodSpace::LinearSingle => "linear_single",
        }
    }
}

impl fmt::Display for LikelihoodSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LikelihoodSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "log" => Ok(LikelihoodSpace::Log),
            "linear_single" | "linear" => Ok(LikelihoodSpace::LinearSingle),
            other => Err(Error::Parse(format!("unknown likelihood space `{other}`"))),
        }
    }
}

/// Result of one grouped loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    /// Mean of `group_losses`.
    pub loss: T,
    pub group_losses: Vec<T>,
    /// Single-precision underflow ratio averaged over groups.
    pub underflow_ratio: f64,
    pub partition: GroupPartition,
}

impl<T: Real> LossReport<T> {
    pub const CSV_HEADER: &'static str = "iter,loss,underflow_ratio,partition_hash";

    pub fn csv_row(&self, iter: usize) -> String {
        format!(
            "{iter},{},{},{:016x}",
            self.loss,
            self.underflow_ratio,
            self.partition.fingerprint()
        )
    }
}

/// Appends the box center as keypoint `K`, always labeled.
pub fn append_auxiliary_center<T: Real>(ann: &PersonAnnotation<T>) -> KeypointSet<T> {
    let mut k = ann.keypoints.clone();
    k.push(ann.bbox.center(), true);
    k
}

/// Shuffles `0..k_total` and cuts it into consecutive groups of `k_g`.
pub fn sample_partition<R: Rng + ?Sized>(k_total: usize, k_g: usize, rng: &mut R) -> Result<GroupPartition> {
    if k_g == 0 || k_total == 0 || !k_total.is_multiple_of(k_g) {
        return Err(Error::Indivisible { k_total, k_g });
    }
    let mut perm: Vec<usize> = (0..k_total).collect();
    perm.shuffle(rng);
    let groups = perm.chunks(k_g).map(<[usize]>::to_vec).collect();
    GroupPartition::new(groups, k_total)
}

pub fn heuristic_partition(skeleton: &SkeletonSpec) -> Result<GroupPartition> {
    let groups = skeleton
        .preset_groups
        .clone()
        .ok_or_else(|| Error::NoPresetGrouping(skeleton.name.clone()))?;
    GroupPartition::new(groups, skeleton.num_trainable())
}

/// `-sum_i ln p(k_i)` over the full keypoint set.
pub fn full_nll_loss<T: Real>(
    field: &MixtureField<T>,
    gts: &[KeypointSet<T>],
    kind: ComponentKind,
) -> Result<T> {
    let sel = DimSelection::full(field.num_keypoints());
    let mut total = T::zero();
    for gt in gts {
        total -= mixture_log_likelihood(field, gt, &sel, kind)?;
    }
    Ok(total)
}

/// Grouped NLL: `(1/N_g) sum_i sum_g -ln p(k_i^g)`.
pub fn group_nll_loss<T: Real>(
    field: &MixtureField<T>,
    gts: &[KeypointSet<T>],
    partition: &GroupPartition,
    kind: ComponentKind,
) -> Result<LossReport<T>> {
    if partition.k_total() != field.num_keypoints() {
        return Err(crate::error::invalid(format!(
            "partition covers {} keypoints, field has {}",
            partition.k_total(),
            field.num_keypoints()
        )));
    }
    let sels = DimSelection::from_partition(partition);
    let mut group_losses = Vec::with_capacity(sels.len());
    let mut ratio = 0.0;
    for sel in &sels {
        let mut l = T::zero();
        for gt in gts {
            l -= mixture_log_likelihood(field, gt, sel, kind)?;
        }
        group_losses.push(l);
        ratio += underflow_ratio::<f32, T>(field, gts, sel, kind);
    }
    let n_g = T::lit(sels.len() as f64);
    let loss = group_losses.iter().copied().sum::<T>() / n_g;
    Ok(LossReport {
        loss,
        group_losses,
        underflow_ratio: ratio / sels.len() as f64,
        partition: partition.clone(),
    })
}
