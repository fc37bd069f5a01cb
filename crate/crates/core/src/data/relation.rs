//! Class-aware sampling of same-class and mismatched-class partner images.

use std::collections::BTreeMap;

use rand::Rng;

use super::manifest::ManifestEntry;
use crate::error::{Error, Result};

/// Partner indices (into the sampler's entry list) for a batch of ground-truth records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSamplingBatch {
    pub gt: Vec<usize>,
    pub same_class: Vec<usize>,
    pub mismatched: Vec<usize>,
    pub gt_classes: Vec<usize>,
    pub same_class_classes: Vec<usize>,
    pub mismatched_classes: Vec<usize>,
    /// Slots where the class had a single member and the ground truth stood in for its partner.
    pub fallbacks: usize,
}

/// Per-worker sampler over a fixed entry list.
#[derive(Debug, Clone)]
pub struct RelationSampler {
    classes: Vec<usize>,
    members: BTreeMap<usize, Vec<usize>>,
    class_of: Vec<usize>,
}

impl RelationSampler {
    pub fn new(class_ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        let class_of: Vec<usize> = class_ids.into_iter().collect();
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in class_of.iter().enumerate() {
            members.entry(c).or_default().push(i);
        }
        if members.len() < 2 {
            return Err(Error::Validation(format!(
                "relation sampling needs at least 2 classes, found {}",
                members.len()
            )));
        }
        Ok(Self {
            classes: members.keys().copied().collect(),
            members,
            class_of,
        })
    }

    pub fn from_entries(entries: &[ManifestEntry]) -> Result<Self> {
        Self::new(entries.iter().map(|e| e.class_id))
    }

    pub fn class_of(&self, index: usize) -> usize {
        self.class_of[index]
    }

    pub fn sample<R: Rng>(&self, gt_indices: &[usize], rng: &mut R) -> Result<RelationSamplingBatch> {
        let n = gt_indices.len();
        let mut batch = RelationSamplingBatch {
            gt: gt_indices.to_vec(),
            same_class: Vec::with_capacity(n),
            mismatched: Vec::with_capacity(n),
            gt_classes: Vec::with_capacity(n),
            same_class_classes: Vec::with_capacity(n),
            mismatched_classes: Vec::with_capacity(n),
            fallbacks: 0,
        };
        for &gt in gt_indices {
            let class = *self.class_of.get(gt).ok_or_else(|| {
                Error::Validation(format!("ground-truth index {gt} is outside the entry list"))
            })?;
            let peers = &self.members[&class];
            let same = if peers.len() < 2 {
                log::warn!("class {class} has a single member; using the ground truth as its same-class partner");
                batch.fallbacks += 1;
                gt
            } else {
                // uniform over peers other than gt
                let k = rng.random_range(0..peers.len() - 1);
                let pos = peers.iter().position(|&p| p == gt).unwrap_or(peers.len());
                peers[if k >= pos { k + 1 } else { k }]
            };
            let k = rng.random_range(0..self.classes.len() - 1);
            let own = self.classes.binary_search(&class).expect("class is registered");
            let other_class = self.classes[if k >= own { k + 1 } else { k }];
            let others = &self.members[&other_class];
            let mis = others[rng.random_range(0..others.len())];

            batch.gt_classes.push(class);
            batch.same_class.push(same);
            batch.same_class_classes.push(class);
            batch.mismatched.push(mis);
            batch.mismatched_classes.push(other_class);
        }
        Ok(batch)
    }
}

/// One-shot wrapper around [`RelationSampler`].
pub fn sample_relation_batch<R: Rng>(
    entries: &[ManifestEntry],
    gt_indices: &[usize],
    rng: &mut R,
) -> Result<RelationSamplingBatch> {
    RelationSampler::from_entries(entries)?.sample(gt_indices, rng)
}
