//! Semi-supervised generalization: the reliable pseudo-labeled set with its
//! expanding threshold, intra/inter-domain MixUp, feature-space augmentation
//! and the loss terms that make up the semi-supervised objective.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CegError, Result};
use crate::exploration::CentroidSet;
use crate::math::{sample_beta, ProbVec};
use crate::model::{Example, GradientSet, MlpParams};
use crate::pools::{Sample, SampleId};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Linear expansion schedule for the reliable-set fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub initial: f64,
    pub last: f64,
    pub total_epochs: usize,
}

impl ThresholdSchedule {
    pub fn new(initial: f64, last: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&initial) || !(0.0..=1.0).contains(&last) || initial > last {
            return Err(CegError::Schedule(format!(
                "need 0 <= T_ini <= T_fin <= 1, got {initial} and {last}"
            )));
        }
        if total_epochs == 0 {
            return Err(CegError::Schedule("total epochs must be positive".into()));
        }
        Ok(Self {
            initial,
            last,
            total_epochs,
        })
    }

    /// Starts at half of the final fraction.
    pub fn half_start(last: f64, total_epochs: usize) -> Result<Self> {
        Self::new(last / 2.0, last, total_epochs)
    }

    pub fn constant(value: f64, total_epochs: usize) -> Result<Self> {
        Self::new(value, value, total_epochs)
    }

    pub fn at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(CegError::Schedule(format!(
                "epoch {epoch} beyond total {}",
                self.total_epochs
            )));
        }
        if epoch == self.total_epochs {
            return Ok(self.last);
        }
        Ok(self.initial + (self.last - self.initial) * epoch as f64 / self.total_epochs as f64)
    }
}

/// An unlabeled sample close enough to a centroid to carry its pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliableSample<S> {
    pub id: SampleId,
    pub domain: usize,
    pub pseudo_class: usize,
    pub distance: S,
    pub features: Vec<S>,
}

/// Keeps the `⌊fraction·N⌋` unlabeled samples nearest (in `F`-space cosine
/// distance) to any centroid and labels each by its nearest centroid's class.
///
/// Returned in ascending `(distance, id)` order.
pub fn build_reliable_set<S: Scalar>(
    model: &MlpParams<S>,
    centroids: &CentroidSet<S>,
    unlabeled: &[&Sample<S>],
    fraction: f64,
) -> Result<Vec<ReliableSample<S>>> {
    if centroids.is_empty() {
        return Err(CegError::EmptyKnowledge);
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CegError::Parameter(format!(
            "reliable fraction {fraction} outside [0, 1]"
        )));
    }
    let mut all = unlabeled
        .iter()
        .map(|s| {
            let nearest = centroids.nearest(&model.features(&s.features)?)?;
            Ok(ReliableSample {
                id: s.id,
                domain: s.domain,
                pseudo_class: nearest.class,
                distance: nearest.distance,
                features: s.features.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    all.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    let keep = (fraction * all.len() as f64).floor() as usize;
    all.truncate(keep);
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Intra,
    Inter,
}

/// A MixUp sample: convex combination of two reliable samples and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample<S> {
    pub features: Vec<S>,
    pub soft_label: ProbVec<S>,
    pub lambda: S,
    pub origin_domains: (usize, usize),
}

impl<S> MixedSample<S> {
    pub fn mode(&self) -> MixMode {
        if self.origin_domains.0 == self.origin_domains.1 {
            MixMode::Intra
        } else {
            MixMode::Inter
        }
    }
}

/// `λ·a + (1−λ)·b` on features and one-hot labels alike.
pub fn mix_pair<S: Scalar>(
    a: &ReliableSample<S>,
    b: &ReliableSample<S>,
    lambda: S,
    num_classes: usize,
) -> Result<MixedSample<S>> {
    if !(lambda >= S::zero() && lambda <= S::one()) {
        return Err(CegError::Parameter(format!("mixing weight {lambda} outside [0, 1]")));
    }
    if a.features.len() != b.features.len() {
        return Err(CegError::Shape {
            context: "mixup features",
            expected: a.features.len(),
            got: b.features.len(),
        });
    }
    let rest = S::one() - lambda;
    let features = a
        .features
        .iter()
        .zip(&b.features)
        .map(|(x, y)| lambda * *x + rest * *y)
        .collect();
    let mut label = vec![S::zero(); num_classes];
    for (class, w) in [(a.pseudo_class, lambda), (b.pseudo_class, rest)] {
        *label.get_mut(class).ok_or_else(|| {
            CegError::Parameter(format!("class {class} out of range for {num_classes} classes"))
        })? += w;
    }
    Ok(MixedSample {
        features,
        soft_label: ProbVec::new(label)?,
        lambda,
        origin_domains: (a.domain, b.domain),
    })
}

/// Reliable samples grouped by domain for pair sampling.
#[derive(Debug)]
pub struct MixPool<'a, S> {
    by_domain: BTreeMap<usize, Vec<&'a ReliableSample<S>>>,
}

impl<'a, S: Scalar> MixPool<'a, S> {
    pub fn new(reliable: &'a [ReliableSample<S>]) -> Self {
        let mut by_domain: BTreeMap<usize, Vec<&'a ReliableSample<S>>> = BTreeMap::new();
        for r in reliable {
            by_domain.entry(r.domain).or_default().push(r);
        }
        for members in by_domain.values_mut() {
            members.sort_by_key(|r| r.id);
        }
        Self { by_domain }
    }

    fn intra_domains(&self) -> Vec<usize> {
        self.by_domain
            .iter()
            .filter(|(_, m)| m.len() >= 2)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn available(&self, mode: MixMode) -> bool {
        match mode {
            MixMode::Intra => !self.intra_domains().is_empty(),
            MixMode::Inter => self.by_domain.len() >= 2,
        }
    }

    /// Draws one pair for `mode` and mixes it with `λ ~ Beta(alpha, alpha)`.
    pub fn sample(
        &self,
        mode: MixMode,
        alpha: f64,
        num_classes: usize,
        rng: &mut RngStream,
    ) -> Result<MixedSample<S>> {
        let (a, b) = match mode {
            MixMode::Intra => {
                let eligible = self.intra_domains();
                if eligible.is_empty() {
                    return Err(CegError::ModeUnavailable(mode));
                }
                let members = &self.by_domain[&eligible[rng.random_range(0..eligible.len())]];
                let i = rng.random_range(0..members.len());
                let mut j = rng.random_range(0..members.len() - 1);
                if j >= i {
                    j += 1;
                }
                (members[i], members[j])
            }
            MixMode::Inter => {
                let domains: Vec<usize> = self.by_domain.keys().copied().collect();
                let k = domains.len();
                if k < 2 {
                    return Err(CegError::ModeUnavailable(mode));
                }
                // uniform over ordered pairs (m, n), m != n
                let pair = rng.random_range(0..k * (k - 1));
                let m = pair / (k - 1);
                let mut n = pair % (k - 1);
                if n >= m {
                    n += 1;
                }
                let first = &self.by_domain[&domains[m]];
                let second = &self.by_domain[&domains[n]];
                (
                    first[rng.random_range(0..first.len())],
                    second[rng.random_range(0..second.len())],
                )
            }
        };
        let lambda = S::lit(sample_beta(alpha, rng)?);
        mix_pair(a, b, lambda, num_classes)
    }
}

/// Weak and strong input perturbations for the consistency loss.
pub trait Augmenter<S: Scalar>: Send + Sync {
    fn weak(&self, x: &[S], rng: &mut RngStream) -> Vec<S>;
    fn strong(&self, x: &[S], rng: &mut RngStream) -> Vec<S>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sigma_weak: 0.05,
            sigma_strong: 0.2,
            mask_prob: 0.3,
        }
    }
}

/// Gaussian jitter scaled per dimension by the training std; the strong view
/// also zeroes coordinates at random.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNoise<S> {
    pub config: AugmentConfig,
    pub scale: Vec<S>,
}

impl<S: Scalar> FeatureNoise<S> {
    pub fn new(config: AugmentConfig, scale: Vec<S>) -> Self {
        Self { config, scale }
    }

    /// Uses the per-dimension population std of `inputs` as the noise scale.
    pub fn fit(config: AugmentConfig, inputs: &[&[S]]) -> Result<Self> {
        let first = inputs.first().ok_or(CegError::EmptyPool)?;
        let d = first.len();
        let n = S::from_count(inputs.len());
        let mut mean = vec![S::zero(); d];
        for x in inputs {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += *v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![S::zero(); d];
        for x in inputs {
            for ((acc, v), m) in var.iter_mut().zip(x.iter()).zip(&mean) {
                *acc += (*v - *m) * (*v - *m);
            }
        }
        Ok(Self::new(config, var.into_iter().map(|v| (v / n).sqrt()).collect()))
    }

    fn jitter(&self, x: &[S], sigma: f64, rng: &mut RngStream) -> Vec<S> {
        x.iter()
            .zip(&self.scale)
            .map(|(v, s)| {
                if sigma == 0.0 {
                    *v
                } else {
                    let z: f64 = rng.sample(StandardNormal);
                    *v + S::lit(z * sigma) * *s
                }
            })
            .collect()
    }
}

impl<S: Scalar> Augmenter<S> for FeatureNoise<S> {
    fn weak(&self, x: &[S], rng: &mut RngStream) -> Vec<S> {
        self.jitter(x, self.config.sigma_weak, rng)
    }

    fn strong(&self, x: &[S], rng: &mut RngStream) -> Vec<S> {
        let mut out = self.jitter(x, self.config.sigma_strong, rng);
        if self.config.mask_prob > 0.0 {
            for v in &mut out {
                if rng.random::<f64>() < self.config.mask_prob {
                    *v = S::zero();
                }
            }
        }
        out
    }
}

/// Mean cross-entropy against revealed one-hot labels.
pub fn loss_ce<S: Scalar>(model: &MlpParams<S>, batch: &[(&[S], usize)]) -> Result<(S, GradientSet<S>)> {
    if batch.is_empty() {
        return Err(CegError::EmptyBatch);
    }
    let targets = batch
        .iter()
        .map(|(_, y)| ProbVec::one_hot(model.dims.output, *y))
        .collect::<Result<Vec<_>>>()?;
    let examples: Vec<Example<'_, S>> = batch
        .iter()
        .zip(&targets)
        .map(|((x, _), t)| Example::new(x, t))
        .collect();
    model.loss_and_gradients(&examples)
}

/// Mean soft-target cross-entropy over MixUp samples; an empty batch contributes zero.
pub fn loss_eg<S: Scalar>(model: &MlpParams<S>, mixed: &[MixedSample<S>]) -> Result<(S, GradientSet<S>)> {
    if mixed.is_empty() {
        return Ok((S::zero(), GradientSet::zeros(model.dims)));
    }
    let examples: Vec<Example<'_, S>> = mixed
        .iter()
        .map(|m| Example::new(&m.features, &m.soft_label))
        .collect();
    model.loss_and_gradients(&examples)
}

/// Weak and strong views of an unlabeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyViews<S> {
    pub weak: Vec<Vec<S>>,
    pub strong: Vec<Vec<S>>,
}

impl<S: Scalar> ConsistencyViews<S> {
    pub fn draw(inputs: &[&[S]], augmenter: &dyn Augmenter<S>, rng: &mut RngStream) -> Self {
        let mut weak = Vec::with_capacity(inputs.len());
        let mut strong = Vec::with_capacity(inputs.len());
        for x in inputs {
            weak.push(augmenter.weak(x, rng));
            strong.push(augmenter.strong(x, rng));
        }
        Self { weak, strong }
    }
}

/// Pseudo-label from each weak view, or `None` when its confidence is below `tau`.
pub fn consistency_targets<S: Scalar>(
    model: &MlpParams<S>,
    weak: &[Vec<S>],
    tau: f64,
) -> Result<Vec<Option<usize>>> {
    let tau = S::lit(tau);
    weak.iter()
        .map(|x| {
            let p = model.predict(x)?;
            Ok((p.max() >= tau).then(|| p.argmax()))
        })
        .collect()
}

/// Consistency loss given frozen pseudo-label targets. Gated-out samples still
/// count in the mean's denominator; an empty batch contributes zero.
pub fn loss_ac_with_targets<S: Scalar>(
    model: &MlpParams<S>,
    strong: &[Vec<S>],
    targets: &[Option<usize>],
) -> Result<(S, GradientSet<S>)> {
    if strong.len() != targets.len() {
        return Err(CegError::Consistency("views and targets differ in length".into()));
    }
    if strong.is_empty() {
        return Ok((S::zero(), GradientSet::zeros(model.dims)));
    }
    let zero = vec![S::zero(); model.dims.output];
    let one_hots = targets
        .iter()
        .map(|t| t.map(|h| ProbVec::one_hot(model.dims.output, h)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let examples: Vec<Example<'_, S>> = strong
        .iter()
        .zip(&one_hots)
        .map(|(x, t)| match t {
            Some(t) => Example::new(x, t.as_slice()),
            None => Example {
                input: x,
                target: &zero,
                weight: S::zero(),
            },
        })
        .collect();
    model.loss_and_gradients(&examples)
}

/// Augmentation-consistency loss: supervise the strong view with the confident
/// weak-view prediction.
pub fn loss_ac<S: Scalar>(
    model: &MlpParams<S>,
    batch: &[&[S]],
    augmenter: &dyn Augmenter<S>,
    tau: f64,
    rng: &mut RngStream,
) -> Result<(S, GradientSet<S>)> {
    let views = ConsistencyViews::draw(batch, augmenter, rng);
    let targets = consistency_targets(model, &views.weak, tau)?;
    loss_ac_with_targets(model, &views.strong, &targets)
}

/// Weights of the semi-supervised objective `ce·L_ce + ac·L_ac + δ·L_eg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub ac: f64,
    pub delta: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn new(delta: f64, tau: f64) -> Result<Self> {
        if !(delta >= 0.0) {
            return Err(CegError::Parameter(format!("delta must be >= 0, got {delta}")));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(CegError::Parameter(format!("tau must lie in (0, 1], got {tau}")));
        }
        Ok(Self {
            ce: 1.0,
            ac: 1.0,
            delta,
            tau,
        })
    }
}

/// Inputs of one semi-supervised step.
#[derive(Debug, Clone, Copy)]
pub struct SsBatch<'a, S> {
    pub labeled: &'a [(&'a [S], usize)],
    pub strong: &'a [Vec<S>],
    pub targets: &'a [Option<usize>],
    pub mixed: &'a [MixedSample<S>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsLoss<S> {
    pub total: S,
    pub ce: S,
    pub ac: S,
    pub eg: S,
    pub grads: GradientSet<S>,
}

/// `L_ss = L_ce + L_ac + δ·L_eg` with the matching gradient combination.
///
/// Terms with zero weight or no data contribute zero and are not evaluated.
pub fn loss_ss<S: Scalar>(model: &MlpParams<S>, batch: SsBatch<'_, S>, weights: LossWeights) -> Result<SsLoss<S>> {
    let mut grads = GradientSet::zeros(model.dims);
    let mut total = S::zero();
    let mut ce = S::zero();
    let mut ac = S::zero();
    let mut eg = S::zero();
    if weights.ce != 0.0 && !batch.labeled.is_empty() {
        let (v, g) = loss_ce(model, batch.labeled)?;
        ce = v;
        total += S::lit(weights.ce) * v;
        grads.add_scaled(&g, S::lit(weights.ce))?;
    }
    if weights.ac != 0.0 && !batch.strong.is_empty() {
        let (v, g) = loss_ac_with_targets(model, batch.strong, batch.targets)?;
        ac = v;
        total += S::lit(weights.ac) * v;
        grads.add_scaled(&g, S::lit(weights.ac))?;
    }
    if weights.delta != 0.0 && !batch.mixed.is_empty() {
        let (v, g) = loss_eg(model, batch.mixed)?;
        eg = v;
        total += S::lit(weights.delta) * v;
        grads.add_scaled(&g, S::lit(weights.delta))?;
    }
    Ok(SsLoss {
        total,
        ce,
        ac,
        eg,
        grads,
    })
}
