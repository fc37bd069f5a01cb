//! Adversarial, relation and generator objectives.

use candle_core::Tensor;

use super::discriminator::DiscriminatorOutput;
use super::relation::{RelationLabel, RelationSupervisor, NUM_RELATIONS};
use crate::error::Result;
use crate::nn::ops::{clamped_neg_log, log_softmax};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// A loss value plus how many probabilities hit the clamp.
#[derive(Debug, Clone)]
pub struct Clamped {
    pub loss: Tensor,
    pub saturated: usize,
}

fn neg_log(p: &Tensor) -> Result<(Tensor, usize)> {
    clamped_neg_log(p, EPS)
}

fn neg_log_complement(p: &Tensor) -> Result<(Tensor, usize)> {
    clamped_neg_log(&(p.ones_like()? - p)?, EPS)
}

/// `-log D(real) - log(1 - D(fake))` for both heads, each a batch mean.
pub fn discriminator_loss(real: &DiscriminatorOutput, fake: &DiscriminatorOutput) -> Result<Clamped> {
    let (a, s1) = neg_log(&real.unconditional)?;
    let (b, s2) = neg_log_complement(&fake.unconditional)?;
    let (c, s3) = neg_log(&real.conditional)?;
    let (d, s4) = neg_log_complement(&fake.conditional)?;
    Ok(Clamped {
        loss: (((a + b)? + c)? + d)?,
        saturated: s1 + s2 + s3 + s4,
    })
}

/// `-log D(fake) - log D(fake, c)`.
pub fn generator_adversarial_loss(fake: &DiscriminatorOutput) -> Result<Clamped> {
    let (a, s1) = neg_log(&fake.unconditional)?;
    let (b, s2) = neg_log(&fake.conditional)?;
    Ok(Clamped {
        loss: (a + b)?,
        saturated: s1 + s2,
    })
}

/// Batch-mean cross-entropy of relation logits `[B, 3]` against one label.
pub fn relation_cross_entropy(logits: &Tensor, label: RelationLabel) -> Result<Tensor> {
    let ls = log_softmax(logits)?;
    Ok(ls.narrow(1, label as usize, 1)?.mean_all()?.neg()?)
}

/// Images entering the relation objective, all at the supervisor's resolution.
#[derive(Debug, Clone)]
pub struct RelationSet {
    pub fake: Tensor,
    pub ground_truth: Tensor,
    pub same_class: Tensor,
    pub mismatched: Tensor,
}

#[derive(Debug, Clone)]
pub struct RelationLoss {
    /// Sum of the three real-pair terms.
    pub real: Tensor,
    /// The (ground truth, fake) term, targeting the positive relation.
    pub fake: Tensor,
    pub total: Tensor,
}

/// Cross-entropy terms for the three real pairs.
pub fn relation_real_terms(rs: &RelationSupervisor, set: &RelationSet) -> Result<Tensor> {
    let gt = &set.ground_truth;
    let pos = relation_cross_entropy(&rs.logits(gt, &set.same_class)?, RelationLabel::Positive)?;
    let neg = relation_cross_entropy(&rs.logits(gt, &set.mismatched)?, RelationLabel::Negative)?;
    let und = relation_cross_entropy(&rs.logits(gt, gt)?, RelationLabel::Undesired)?;
    Ok(((pos + neg)? + und)?)
}

pub fn relation_supervisor_loss(rs: &RelationSupervisor, set: &RelationSet) -> Result<RelationLoss> {
    let real = relation_real_terms(rs, set)?;
    let fake = relation_cross_entropy(&rs.logits(&set.ground_truth, &set.fake)?, RelationLabel::Positive)?;
    Ok(RelationLoss {
        total: (&real + &fake)?,
        real,
        fake,
    })
}

/// Generator objective broken into its parts.
#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub adversarial: Vec<Tensor>,
    pub relation: Option<Tensor>,
    pub kl: Tensor,
    pub total: Tensor,
    pub saturated: usize,
}

/// `sum_i L_G_i + L_RS + kl_weight * kl`; the relation term is skipped when `None`.
pub fn generator_loss(
    fakes: &[DiscriminatorOutput],
    relation: Option<&RelationLoss>,
    kl: &Tensor,
    kl_weight: f64,
) -> Result<GeneratorLoss> {
    let mut adversarial = Vec::with_capacity(fakes.len());
    let mut saturated = 0;
    let mut total = kl.affine(kl_weight, 0.0)?;
    for f in fakes {
        let t = generator_adversarial_loss(f)?;
        saturated += t.saturated;
        total = (total + &t.loss)?;
        adversarial.push(t.loss);
    }
    if let Some(r) = relation {
        total = (total + &r.total)?;
    }
    Ok(GeneratorLoss {
        adversarial,
        relation: relation.map(|r| r.total.clone()),
        kl: kl.clone(),
        total,
        saturated,
    })
}

/// Uniform relation probabilities give this loss.
pub fn uniform_relation_loss() -> f64 {
    4.0 * (NUM_RELATIONS as f64).ln()
}
