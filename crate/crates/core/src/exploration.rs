//! Active exploration: per-sample query scores, knowledge centroids, rank
//! fusion and batch selection, plus the classic active-learning baselines.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CegError, Result};
use crate::math::{cosine_distance, entropy, squared_euclidean};
use crate::model::{DomainDiscriminator, MlpParams};
use crate::pools::{PoolState, Sample, SampleId};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// `1 - (p_top1 - p_top2)` for a class distribution.
pub fn margin_uncertainty<S: Scalar>(probs: &[S]) -> Result<S> {
    if probs.len() < 2 {
        return Err(CegError::Config(
            "margin uncertainty needs at least two classes".into(),
        ));
    }
    let (mut first, mut second) = (S::neg_infinity(), S::neg_infinity());
    for p in probs {
        if *p > first {
            second = first;
            first = *p;
        } else if *p > second {
            second = *p;
        }
    }
    Ok(S::one() - (first - second))
}

/// Class uncertainty `S_u` of the classifier's prediction at `x`.
pub fn uncertainty_score<S: Scalar>(model: &MlpParams<S>, x: &[S]) -> Result<S> {
    margin_uncertainty(&model.predict(x)?)
}

/// Domain representativeness `S_r`: the discriminator's top domain probability.
pub fn representativeness_score<S: Scalar>(disc: &DomainDiscriminator<S>, x: &[S]) -> Result<S> {
    Ok(disc.predict(x)?.max())
}

/// A labeled sample as seen by centroid computation.
#[derive(Debug, Clone, Copy)]
pub struct LabeledRef<'a, S> {
    pub features: &'a [S],
    pub domain: usize,
    pub class: usize,
}

/// Knowledge centroids keyed by `(domain, class)`; only non-empty cells exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSet<S> {
    entries: BTreeMap<(usize, usize), Vec<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestCentroid<S> {
    pub distance: S,
    pub domain: usize,
    pub class: usize,
}

/// Cosine distance, with pairs involving a zero vector treated as orthogonal.
///
/// ReLU features can be identically zero; such points carry no direction.
pub fn feature_distance<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    match cosine_distance(a, b) {
        Err(CegError::DegenerateVector) => Ok(S::one()),
        other => other,
    }
}

impl<S: Scalar> CentroidSet<S> {
    pub fn from_entries(entries: BTreeMap<(usize, usize), Vec<S>>) -> Self {
        Self { entries }
    }

    pub fn get(&self, domain: usize, class: usize) -> Option<&[S]> {
        self.entries.get(&(domain, class)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<S>)> {
        self.entries.iter()
    }

    /// Closest centroid to a feature vector; ties go to the lowest `(domain, class)`.
    pub fn nearest(&self, features: &[S]) -> Result<NearestCentroid<S>> {
        let mut best: Option<NearestCentroid<S>> = None;
        for (&(domain, class), mu) in &self.entries {
            let distance = feature_distance(features, mu)?;
            if best.is_none_or(|b| distance < b.distance) {
                best = Some(NearestCentroid {
                    distance,
                    domain,
                    class,
                });
            }
        }
        best.ok_or(CegError::EmptyKnowledge)
    }
}

/// Mean feature embedding `F(x)` per `(domain, class)` cell of the labeled pool.
pub fn compute_centroids<S: Scalar>(
    model: &MlpParams<S>,
    labeled: &[LabeledRef<'_, S>],
) -> Result<CentroidSet<S>> {
    if labeled.is_empty() {
        return Err(CegError::EmptyKnowledge);
    }
    let mut sums: BTreeMap<(usize, usize), (Vec<S>, usize)> = BTreeMap::new();
    for item in labeled {
        let f = model.features(item.features)?;
        let cell = sums
            .entry((item.domain, item.class))
            .or_insert_with(|| (vec![S::zero(); f.len()], 0));
        for (acc, v) in cell.0.iter_mut().zip(&f) {
            *acc += *v;
        }
        cell.1 += 1;
    }
    let entries = sums
        .into_iter()
        .map(|(key, (mut sum, n))| {
            let n = S::from_count(n);
            sum.iter_mut().for_each(|v| *v /= n);
            (key, sum)
        })
        .collect();
    Ok(CentroidSet { entries })
}

/// Information diversity `S_d`: distance from `F(x)` to the nearest centroid.
pub fn diversity_score<S: Scalar>(
    model: &MlpParams<S>,
    centroids: &CentroidSet<S>,
    x: &[S],
) -> Result<S> {
    Ok(centroids.nearest(&model.features(x)?)?.distance)
}

/// Raw per-sample scores, ordered by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScores<S> {
    pub ids: Vec<SampleId>,
    pub uncertainty: Vec<S>,
    pub representativeness: Vec<S>,
    pub diversity: Vec<S>,
}

/// Scores every unlabeled sample. Without centroids the diversity term is constant.
pub fn score_unlabeled<S: Scalar>(
    model: &MlpParams<S>,
    disc: &DomainDiscriminator<S>,
    centroids: Option<&CentroidSet<S>>,
    unlabeled: &[&Sample<S>],
) -> Result<RawScores<S>> {
    let mut rows: Vec<(SampleId, S, S, S)> = unlabeled
        .par_iter()
        .map(|s| {
            let u = uncertainty_score(model, &s.features)?;
            let r = representativeness_score(disc, &s.features)?;
            let d = match centroids {
                Some(c) => diversity_score(model, c, &s.features)?,
                None => S::zero(),
            };
            Ok((s.id, u, r, d))
        })
        .collect::<Result<_>>()?;
    rows.sort_by_key(|r| r.0);
    Ok(RawScores {
        ids: rows.iter().map(|r| r.0).collect(),
        uncertainty: rows.iter().map(|r| r.1).collect(),
        representativeness: rows.iter().map(|r| r.2).collect(),
        diversity: rows.iter().map(|r| r.3).collect(),
    })
}

/// Ranks `scores` from high to low: rank 1 is the highest score, ties by ascending id.
pub fn rank_high_to_low<S: Scalar>(ids: &[SampleId], scores: &[S]) -> Result<Vec<usize>> {
    if ids.len() != scores.len() {
        return Err(CegError::Consistency("ids and scores differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CegError::NumericInput("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    let mut ranks = vec![0; ids.len()];
    for (pos, i) in order.into_iter().enumerate() {
        ranks[i] = pos + 1;
    }
    Ok(ranks)
}

/// Weights of the three rankings in the fused query ranking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub uncertainty: f64,
    pub representativeness: f64,
    pub diversity: f64,
}

impl FusionWeights {
    pub fn new(gamma1: f64, gamma2: f64) -> Self {
        Self {
            uncertainty: 1.0,
            representativeness: gamma1,
            diversity: gamma2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: SampleId,
    pub uncertainty: f64,
    pub representativeness: f64,
    pub diversity: f64,
    pub rank_uncertainty: usize,
    pub rank_representativeness: usize,
    pub rank_diversity: usize,
    pub fused: f64,
}

/// Scores, per-criterion ranks and fused ranking of the unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub rows: Vec<ScoreRow>,
}

/// `R = w_u·S_u' + γ1·S_r' + γ2·S_d'`; the best samples have the smallest `R`.
pub fn fuse_ranks<S: Scalar>(raw: &RawScores<S>, weights: FusionWeights) -> Result<QueryScores> {
    let n = raw.ids.len();
    if raw.uncertainty.len() != n || raw.representativeness.len() != n || raw.diversity.len() != n {
        return Err(CegError::Consistency("score streams differ in length".into()));
    }
    let ru = rank_high_to_low(&raw.ids, &raw.uncertainty)?;
    let rr = rank_high_to_low(&raw.ids, &raw.representativeness)?;
    let rd = rank_high_to_low(&raw.ids, &raw.diversity)?;
    let rows = (0..n)
        .map(|i| ScoreRow {
            id: raw.ids[i],
            uncertainty: raw.uncertainty[i].as_f64(),
            representativeness: raw.representativeness[i].as_f64(),
            diversity: raw.diversity[i].as_f64(),
            rank_uncertainty: ru[i],
            rank_representativeness: rr[i],
            rank_diversity: rd[i],
            fused: weights.uncertainty * ru[i] as f64
                + weights.representativeness * rr[i] as f64
                + weights.diversity * rd[i] as f64,
        })
        .collect();
    Ok(QueryScores { rows })
}

fn check_quota(pool: &PoolState, quota: usize) -> Result<()> {
    if quota > pool.ledger().remaining() {
        return Err(CegError::Budget(format!(
            "quota {quota} exceeds remaining budget {}",
            pool.ledger().remaining()
        )));
    }
    if quota > pool.unlabeled().len() {
        return Err(CegError::Budget(format!(
            "quota {quota} exceeds unlabeled pool size {}",
            pool.unlabeled().len()
        )));
    }
    Ok(())
}

/// The `quota` unlabeled ids with the smallest fused ranking, in selection order.
pub fn select_query_batch(pool: &PoolState, scores: &QueryScores, quota: usize) -> Result<Vec<SampleId>> {
    check_quota(pool, quota)?;
    if scores.rows.len() != pool.unlabeled().len()
        || scores.rows.iter().any(|r| !pool.unlabeled().contains(&r.id))
    {
        return Err(CegError::Consistency(
            "scores do not cover exactly the unlabeled pool".into(),
        ));
    }
    let mut order: Vec<&ScoreRow> = scores.rows.iter().collect();
    order.sort_by(|a, b| {
        a.fused
            .partial_cmp(&b.fused)
            .unwrap_or(Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    Ok(order.into_iter().take(quota).map(|r| r.id).collect())
}

/// Writes the per-round score dump as CSV.
pub fn write_score_dump(path: &Path, scores: &QueryScores, selected: &[SampleId]) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "id,s_u,s_r,s_d,rank_u,rank_r,rank_d,r,selected")?;
    for r in &scores.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.uncertainty,
            r.representativeness,
            r.diversity,
            r.rank_uncertainty,
            r.rank_representativeness,
            r.rank_diversity,
            r.fused,
            u8::from(selected.contains(&r.id))
        )?;
    }
    Ok(())
}

/// Classic active-learning query strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Entropy,
    Bvsb,
    Confidence,
    Coreset,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Uniform,
        Strategy::Entropy,
        Strategy::Bvsb,
        Strategy::Confidence,
        Strategy::Coreset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Entropy => "entropy",
            Strategy::Bvsb => "bvsb",
            Strategy::Confidence => "confidence",
            Strategy::Coreset => "coreset",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = CegError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CegError::Config(format!("unknown query strategy '{s}'")))
    }
}

/// Selected ids with the score each was chosen by.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    pub ids: Vec<SampleId>,
    pub scores: Vec<f64>,
}

/// Score-based baseline value (higher = queried first). `None` for set-based strategies.
pub fn baseline_score<S: Scalar>(strategy: Strategy, probs: &[S]) -> Result<Option<S>> {
    Ok(match strategy {
        Strategy::Entropy => Some(entropy(probs)),
        Strategy::Bvsb => Some(margin_uncertainty(probs)?),
        Strategy::Confidence => Some(S::one() - probs.iter().copied().fold(S::zero(), S::max)),
        Strategy::Uniform | Strategy::Coreset => None,
    })
}

/// Greedy k-center (farthest-first) selection in Euclidean distance.
///
/// Each pick maximizes the distance to the nearest already-covered point; the
/// lowest id wins ties. With nothing covered, the first pick is the lowest id.
pub fn farthest_first<S: Scalar>(
    covered: &[Vec<S>],
    candidates: &[(SampleId, Vec<S>)],
    k: usize,
) -> Selection {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| candidates[i].0);
    let mut min_dist: Vec<S> = order
        .iter()
        .map(|&i| {
            covered
                .iter()
                .map(|c| squared_euclidean(c, &candidates[i].1))
                .fold(S::infinity(), S::min)
        })
        .collect();
    let mut taken = vec![false; order.len()];
    let mut selection = Selection::default();
    for _ in 0..k.min(order.len()) {
        let mut best: Option<usize> = None;
        for (pos, d) in min_dist.iter().enumerate() {
            if !taken[pos] && best.is_none_or(|b| *d > min_dist[b]) {
                best = Some(pos);
            }
        }
        let Some(pos) = best else { break };
        taken[pos] = true;
        let (id, center) = &candidates[order[pos]];
        selection.ids.push(*id);
        selection.scores.push(min_dist[pos].sqrt().as_f64());
        for (p, d) in min_dist.iter_mut().enumerate() {
            let nd = squared_euclidean(center, &candidates[order[p]].1);
            if nd < *d {
                *d = nd;
            }
        }
    }
    selection
}

/// Runs a baseline strategy over the unlabeled pool.
///
/// `labeled` holds the raw inputs of the labeled pool (used by coreset).
pub fn select_baseline<S: Scalar>(
    strategy: Strategy,
    model: &MlpParams<S>,
    pool: &PoolState,
    labeled: &[&[S]],
    unlabeled: &[&Sample<S>],
    quota: usize,
    rng: &mut RngStream,
) -> Result<Selection> {
    check_quota(pool, quota)?;
    let mut unlabeled: Vec<&Sample<S>> = unlabeled.to_vec();
    unlabeled.sort_by_key(|s| s.id);
    if unlabeled.len() != pool.unlabeled().len()
        || unlabeled.iter().any(|s| !pool.unlabeled().contains(&s.id))
    {
        return Err(CegError::Consistency(
            "candidates do not match the unlabeled pool".into(),
        ));
    }
    match strategy {
        Strategy::Uniform => {
            let picks = index::sample(rng, unlabeled.len(), quota);
            Ok(Selection {
                ids: picks.iter().map(|i| unlabeled[i].id).collect(),
                scores: vec![0.0; quota],
            })
        }
        Strategy::Coreset => {
            let covered = labeled
                .iter()
                .map(|x| model.features(x))
                .collect::<Result<Vec<_>>>()?;
            let candidates = unlabeled
                .par_iter()
                .map(|s| Ok((s.id, model.features(&s.features)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(farthest_first(&covered, &candidates, quota))
        }
        _ => {
            let mut scored: Vec<(SampleId, S)> = unlabeled
                .par_iter()
                .map(|s| {
                    let p = model.predict(&s.features)?;
                    let v = baseline_score(strategy, &p)?.expect("score-based strategy");
                    Ok((s.id, v))
                })
                .collect::<Result<_>>()?;
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            scored.truncate(quota);
            Ok(Selection {
                ids: scored.iter().map(|s| s.0).collect(),
                scores: scored.iter().map(|s| s.1.as_f64()).collect(),
            })
        }
    }
}
