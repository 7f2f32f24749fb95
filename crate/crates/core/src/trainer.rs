//! The collaborative exploration/generalization loop, baseline strategy runs,
//! ablations and evaluation.
//!
//! A run is a small state machine: [`Run::new`] reveals the initial labels,
//! every [`Run::step`] executes one epoch (centroids, optional query round,
//! discriminator update, one epoch of semi-supervised SGD, evaluation).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::datagen::DomainSplit;
use crate::error::{CegError, Result};
use crate::exploration::{
    compute_centroids, fuse_ranks, score_unlabeled, select_baseline, select_query_batch, CentroidSet,
    FusionWeights, LabeledRef, QueryScores, Selection, Strategy,
};
use crate::generalization::{
    build_reliable_set, consistency_targets, loss_ss, AugmentConfig, ConsistencyViews, FeatureNoise, LossWeights,
    MixMode, MixPool, MixedSample, SsBatch, ThresholdSchedule,
};
use crate::model::{DomainDiscriminator, MlpDims, MlpParams};
use crate::pools::{BudgetLedger, LabelOracle, PoolState, QueryRecord, Sample, SampleId};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Query strategy of a run: the fused ranking, or one of the classic baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QueryStrategy {
    Ceg,
    Baseline(Strategy),
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryStrategy::Ceg => f.write_str("ceg"),
            QueryStrategy::Baseline(s) => s.fmt(f),
        }
    }
}

impl FromStr for QueryStrategy {
    type Err = CegError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ceg" {
            Ok(QueryStrategy::Ceg)
        } else {
            s.parse().map(QueryStrategy::Baseline)
        }
    }
}

impl TryFrom<String> for QueryStrategy {
    type Error = CegError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QueryStrategy> for String {
    fn from(s: QueryStrategy) -> String {
        s.to_string()
    }
}

/// Training objective used by baseline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineLoss {
    /// Supervised cross-entropy on the labeled pool only.
    Ce,
    /// The full semi-supervised objective.
    Ss,
}

/// Components that an ablation can switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "S_u")]
    Uncertainty,
    #[serde(rename = "S_r")]
    Representativeness,
    #[serde(rename = "S_d")]
    Diversity,
    #[serde(rename = "L_ac")]
    Consistency,
    #[serde(rename = "L_eg")]
    Expansion,
    #[serde(rename = "M_intra")]
    IntraMix,
    #[serde(rename = "M_inter")]
    InterMix,
    #[serde(rename = "dynamicT")]
    DynamicThreshold,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Uncertainty,
        Component::Representativeness,
        Component::Diversity,
        Component::Consistency,
        Component::Expansion,
        Component::IntraMix,
        Component::InterMix,
        Component::DynamicThreshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Uncertainty => "S_u",
            Component::Representativeness => "S_r",
            Component::Diversity => "S_d",
            Component::Consistency => "L_ac",
            Component::Expansion => "L_eg",
            Component::IntraMix => "M_intra",
            Component::InterMix => "M_inter",
            Component::DynamicThreshold => "dynamicT",
        }
    }
}

impl FromStr for Component {
    type Err = CegError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CegError::Config(format!("unknown ablation component '{s}'")))
    }
}

pub type Ablation = BTreeSet<Component>;

/// Label of an ablation variant, e.g. `ceg-w/o-L_ac-L_eg`.
pub fn ablation_label(disabled: &Ablation) -> String {
    if disabled.is_empty() {
        return "ceg".into();
    }
    let names: Vec<&str> = disabled.iter().map(|c| c.name()).collect();
    format!("ceg-w/o-{}", names.join("-"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub learn_epochs: usize,
    /// Annotation budget `B` (samples).
    pub budget: usize,
    /// Initial budget; `⌊B/2⌋` when absent.
    pub initial_budget: Option<usize>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub delta: f64,
    /// Final reliable-set fraction `T_fin`.
    pub t_final: f64,
    /// Initial fraction; `T_fin / 2` when absent.
    pub t_initial: Option<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub lr_feature: f64,
    pub lr_head: f64,
    pub lr_discriminator: f64,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub discriminator_hidden_width: usize,
    /// Passes over the unlabeled pool per discriminator update.
    pub discriminator_epochs: usize,
    /// Re-initialize the discriminator every epoch instead of continuing training.
    pub retrain_discriminator: bool,
    /// SGD steps per epoch; one pass over the source pool size when absent.
    pub steps_per_epoch: Option<usize>,
    pub augment: AugmentConfig,
    /// Fraction of the labeled pool held out each epoch for source validation.
    pub validation_fraction: f64,
    pub seed: u64,
    pub strategy: QueryStrategy,
    pub baseline_loss: BaselineLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 10,
            learn_epochs: 20,
            budget: 0,
            initial_budget: None,
            gamma1: 3.0,
            gamma2: 1.0,
            delta: 0.3,
            t_final: 0.5,
            t_initial: None,
            alpha: 0.2,
            tau: 0.95,
            lr_feature: 0.003,
            lr_head: 0.01,
            lr_discriminator: 0.01,
            batch_size: 16,
            hidden_width: 64,
            discriminator_hidden_width: 32,
            discriminator_epochs: 1,
            retrain_discriminator: false,
            steps_per_epoch: None,
            augment: AugmentConfig::default(),
            validation_fraction: 0.1,
            seed: 0,
            strategy: QueryStrategy::Ceg,
            baseline_loss: BaselineLoss::Ce,
        }
    }
}

impl TrainConfig {
    pub fn initial_budget(&self) -> usize {
        self.initial_budget.unwrap_or(self.budget / 2)
    }

    pub fn validate(&self, num_sources: usize) -> Result<()> {
        let fail = |m: String| Err(CegError::Config(m));
        if self.pretrain_epochs >= self.learn_epochs {
            return fail(format!(
                "pretrain_epochs ({}) must be < learn_epochs ({})",
                self.pretrain_epochs, self.learn_epochs
            ));
        }
        if self.initial_budget() > self.budget {
            return fail(format!(
                "initial budget {} exceeds budget {}",
                self.initial_budget(),
                self.budget
            ));
        }
        if self.budget > num_sources {
            return fail(format!(
                "budget {} exceeds the {num_sources} source samples",
                self.budget
            ));
        }
        for (name, v) in [
            ("lr_feature", self.lr_feature),
            ("lr_head", self.lr_head),
            ("lr_discriminator", self.lr_discriminator),
            ("alpha", self.alpha),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.batch_size == 0 || self.hidden_width == 0 || self.discriminator_hidden_width == 0 {
            return fail("batch size and hidden widths must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be positive".into());
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return fail("gamma1 and gamma2 must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must lie in [0, 1)".into());
        }
        LossWeights::new(self.delta, self.tau)?;
        self.schedule(false)?;
        Ok(())
    }

    fn schedule(&self, static_threshold: bool) -> Result<ThresholdSchedule> {
        if static_threshold {
            ThresholdSchedule::constant(self.t_final, self.learn_epochs)
        } else {
            let t_ini = self.t_initial.unwrap_or(self.t_final / 2.0);
            ThresholdSchedule::new(t_ini, self.t_final, self.learn_epochs)
        }
    }

    /// Query quota of round `round` (0-based): the post-initial budget split
    /// evenly, earlier rounds taking the remainder.
    pub fn round_quota(&self, round: usize) -> usize {
        let rounds = self.learn_epochs - self.pretrain_epochs;
        let extra = self.budget - self.initial_budget();
        extra / rounds + usize::from(round < extra % rounds)
    }
}

/// Per-epoch diagnostics; also the line format of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "T")]
    pub threshold: f64,
    pub reliable_size: usize,
    /// Fraction of reliable pseudo-labels matching the hidden class (diagnostic only).
    pub pseudo_label_accuracy: Option<f64>,
    pub mix_modes: Vec<MixMode>,
    #[serde(rename = "L_ce")]
    pub l_ce: f64,
    #[serde(rename = "L_ac")]
    pub l_ac: f64,
    #[serde(rename = "L_eg")]
    pub l_eg: f64,
    #[serde(rename = "L_ss")]
    pub l_ss: f64,
    pub steps: usize,
    pub discriminator_loss: Option<f64>,
    pub queried: Vec<SampleId>,
    pub labeled: usize,
    pub unlabeled: usize,
    pub spent: usize,
    pub source_val_accuracy: Option<f64>,
    pub target_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub strategy: QueryStrategy,
    pub ablation: Vec<Component>,
    pub loss: BaselineLoss,
    pub target_domain: usize,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub queries: Vec<QueryRecord>,
    pub notes: Vec<String>,
    pub final_target_accuracy: f64,
    pub budget_total: usize,
    pub budget_spent: usize,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Rewrites `path` with one JSON line per query round.
    pub fn write_query_log(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for q in &self.queries {
            writeln!(out, "{}", serde_json::to_string(q)?)?;
        }
        Ok(())
    }

    /// Rewrites `path` with one JSON line per epoch.
    pub fn write_training_log(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for e in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }
}

/// Fraction of `samples` whose argmax prediction equals the hidden class.
pub fn evaluate<S: Scalar>(model: &MlpParams<S>, samples: &[Sample<S>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(CegError::Evaluation("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        if model.predict(&s.features)?.argmax() == s.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Cycles through a list in reshuffled passes.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn take(&mut self, n: usize, rng: &mut RngStream) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let k = (n - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + k]);
            self.pos += k;
            // one pass at most per batch: no duplicate examples inside a batch
            if self.pos == self.order.len() && out.len() >= self.order.len() {
                break;
            }
        }
        out
    }
}

struct Streams {
    batches: RngStream,
    augment: RngStream,
    mixup: RngStream,
    validation: RngStream,
    discriminator: RngStream,
    query: RngStream,
}

/// One training run over a leave-one-domain-out split.
pub struct Run<'a, S: Scalar> {
    config: TrainConfig,
    ablation: Ablation,
    split: &'a DomainSplit<S>,
    by_id: BTreeMap<SampleId, usize>,
    model: MlpParams<S>,
    discriminator: DomainDiscriminator<S>,
    oracle: LabelOracle,
    pool: PoolState,
    schedule: ThresholdSchedule,
    weights: LossWeights,
    augmenter: FeatureNoise<S>,
    streams: Streams,
    epoch: usize,
    epochs: Vec<EpochRecord>,
    queries: Vec<QueryRecord>,
    notes: Vec<String>,
    last_scores: Option<QueryScores>,
    started: Instant,
}

impl<'a, S: Scalar> Run<'a, S> {
    /// Validates the setup and reveals the initial uniform draw of labels.
    pub fn new(config: TrainConfig, split: &'a DomainSplit<S>, ablation: Ablation) -> Result<Self> {
        let started = Instant::now();
        config.validate(split.sources.len())?;
        let k = split.num_source_domains();
        if k < 2 {
            return Err(CegError::Config(format!("need at least 2 source domains, got {k}")));
        }
        if split.target.is_empty() {
            return Err(CegError::Config("target domain is empty".into()));
        }
        if config.strategy != QueryStrategy::Ceg && !ablation.is_empty() {
            return Err(CegError::Config("ablations apply to the ceg strategy only".into()));
        }
        let input = split.sources.first().ok_or(CegError::EmptyPool)?.features.len();
        let by_id: BTreeMap<SampleId, usize> = split.sources.iter().enumerate().map(|(i, s)| (s.id, i)).collect();

        let seed = config.seed;
        let mut oracle = LabelOracle::new(&split.sources)?;
        let ledger = BudgetLedger::new(config.budget, config.initial_budget())?;
        let pool = PoolState::init(&split.sources, ledger, &mut oracle, &mut RngStream::new(seed, "pool-init"))?;
        let model = MlpParams::init(
            MlpDims {
                input,
                hidden: config.hidden_width,
                output: split.num_classes,
            },
            &mut RngStream::new(seed, "model-init"),
        )?;
        let discriminator = DomainDiscriminator::new(
            input,
            config.discriminator_hidden_width,
            k,
            &mut RngStream::new(seed, "discriminator-init"),
        )?;
        let inputs: Vec<&[S]> = split.sources.iter().map(|s| s.features.as_slice()).collect();
        let augmenter = FeatureNoise::fit(config.augment, &inputs)?;

        let mut weights = LossWeights::new(config.delta, config.tau)?;
        let baseline_ce = matches!(config.strategy, QueryStrategy::Baseline(_)) && config.baseline_loss == BaselineLoss::Ce;
        if baseline_ce || ablation.contains(&Component::Consistency) {
            weights.ac = 0.0;
        }
        if baseline_ce || ablation.contains(&Component::Expansion) {
            weights.delta = 0.0;
        }
        let schedule = config.schedule(ablation.contains(&Component::DynamicThreshold))?;

        let mut notes = Vec::new();
        if ablation.contains(&Component::IntraMix) && ablation.contains(&Component::InterMix) {
            weights.delta = 0.0;
            notes.push("both mixing modes disabled; L_eg is inactive".into());
        }
        if [Component::Uncertainty, Component::Representativeness, Component::Diversity]
            .iter()
            .all(|c| ablation.contains(c))
        {
            notes.push("all query scores disabled; falling back to uniform selection".into());
        }

        let streams = Streams {
            batches: RngStream::new(seed, "train-batches"),
            augment: RngStream::new(seed, "augment"),
            mixup: RngStream::new(seed, "mixup"),
            validation: RngStream::new(seed, "validation"),
            discriminator: RngStream::new(seed, "discriminator-train"),
            query: RngStream::new(seed, "query"),
        };
        Ok(Self {
            config,
            ablation,
            split,
            by_id,
            model,
            discriminator,
            oracle,
            pool,
            schedule,
            weights,
            augmenter,
            streams,
            epoch: 0,
            epochs: Vec::new(),
            queries: Vec::new(),
            notes,
            last_scores: None,
            started,
        })
    }

    pub fn model(&self) -> &MlpParams<S> {
        &self.model
    }

    pub fn discriminator(&self) -> &DomainDiscriminator<S> {
        &self.discriminator
    }

    pub fn pool(&self) -> &PoolState {
        &self.pool
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.learn_epochs
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    /// Scores of the most recent fused-ranking query round.
    pub fn last_scores(&self) -> Option<&QueryScores> {
        self.last_scores.as_ref()
    }

    /// Whether the next epoch will run a query round.
    pub fn queries_next_epoch(&self) -> bool {
        self.epoch + 1 > self.config.pretrain_epochs && !self.is_finished()
    }

    fn sample(&self, id: SampleId) -> &'a Sample<S> {
        &self.split.sources[self.by_id[&id]]
    }

    fn unlabeled_samples(&self) -> Vec<&'a Sample<S>> {
        self.pool.unlabeled().iter().map(|id| self.sample(*id)).collect()
    }

    pub fn centroids(&self) -> Result<Option<CentroidSet<S>>> {
        if self.pool.labeled().is_empty() {
            return Ok(None);
        }
        let labeled: Vec<LabeledRef<'_, S>> = self
            .pool
            .labeled()
            .iter()
            .map(|(id, class)| {
                let s = self.sample(*id);
                LabeledRef {
                    features: &s.features,
                    domain: s.domain,
                    class: *class,
                }
            })
            .collect();
        compute_centroids(&self.model, &labeled).map(Some)
    }

    fn uses_score_fusion(&self) -> bool {
        self.config.strategy == QueryStrategy::Ceg
            && ![Component::Uncertainty, Component::Representativeness, Component::Diversity]
                .iter()
                .all(|c| self.ablation.contains(c))
    }

    fn select(&mut self, centroids: Option<&CentroidSet<S>>, quota: usize) -> Result<Selection> {
        let unlabeled = self.unlabeled_samples();
        if self.uses_score_fusion() {
            let raw = score_unlabeled(&self.model, &self.discriminator, centroids, &unlabeled)?;
            let mut fusion = FusionWeights::new(self.config.gamma1, self.config.gamma2);
            if self.ablation.contains(&Component::Uncertainty) {
                fusion.uncertainty = 0.0;
            }
            if self.ablation.contains(&Component::Representativeness) {
                fusion.representativeness = 0.0;
            }
            if self.ablation.contains(&Component::Diversity) {
                fusion.diversity = 0.0;
            }
            let scores = fuse_ranks(&raw, fusion)?;
            let ids = select_query_batch(&self.pool, &scores, quota)?;
            let fused: BTreeMap<SampleId, f64> = scores.rows.iter().map(|r| (r.id, r.fused)).collect();
            let selection = Selection {
                scores: ids.iter().map(|id| fused[id]).collect(),
                ids,
            };
            self.last_scores = Some(scores);
            Ok(selection)
        } else {
            let strategy = match self.config.strategy {
                QueryStrategy::Baseline(s) => s,
                QueryStrategy::Ceg => Strategy::Uniform,
            };
            let labeled: Vec<&[S]> = self
                .pool
                .labeled()
                .keys()
                .map(|id| self.sample(*id).features.as_slice())
                .collect();
            select_baseline(
                strategy,
                &self.model,
                &self.pool,
                &labeled,
                &unlabeled,
                quota,
                &mut self.streams.query,
            )
        }
    }

    fn update_discriminator(&mut self) -> Result<Option<f64>> {
        let needs_discriminator = self.uses_score_fusion() && !self.ablation.contains(&Component::Representativeness);
        let unlabeled = self.unlabeled_samples();
        if !needs_discriminator || unlabeled.is_empty() {
            return Ok(None);
        }
        if self.config.retrain_discriminator {
            self.discriminator = DomainDiscriminator::new(
                self.model.dims.input,
                self.config.discriminator_hidden_width,
                self.split.num_source_domains(),
                &mut RngStream::new(self.config.seed, format!("discriminator-init/{}", self.epoch + 1)),
            )?;
        }
        let pool: Vec<(&[S], usize)> = unlabeled.iter().map(|s| (s.features.as_slice(), s.domain)).collect();
        let trace = self.discriminator.train(
            &pool,
            self.config.discriminator_epochs,
            self.config.batch_size,
            S::lit(self.config.lr_discriminator),
            &mut self.streams.discriminator,
        )?;
        Ok(Some(trace.loss_after.as_f64()))
    }

    /// Executes one epoch and returns its record.
    pub fn step(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(CegError::Config("run already finished".into()));
        }
        let n = self.epoch + 1;

        let centroids = self.centroids()?;

        let mut queried = Vec::new();
        if n > self.config.pretrain_epochs {
            let round = n - self.config.pretrain_epochs - 1;
            let quota = self
                .config
                .round_quota(round)
                .min(self.pool.unlabeled().len())
                .min(self.pool.ledger().remaining());
            if quota > 0 {
                let selection = self.select(centroids.as_ref(), quota)?;
                self.pool.query(&selection.ids, &mut self.oracle)?;
                self.queries.push(QueryRecord {
                    epoch: n,
                    ids: selection.ids.clone(),
                    scores: selection.scores,
                    spent: self.pool.ledger().spent(),
                });
                queried = selection.ids;
            }
        }

        let discriminator_loss = self.update_discriminator()?;

        let threshold = self.schedule.at(n)?;
        let mut record = self.train_epoch(centroids.as_ref(), threshold)?;
        record.epoch = n;
        record.discriminator_loss = discriminator_loss;
        record.queried = queried;
        record.labeled = self.pool.labeled().len();
        record.unlabeled = self.pool.unlabeled().len();
        record.spent = self.pool.ledger().spent();
        record.target_accuracy = evaluate(&self.model, &self.split.target)?;

        self.epoch = n;
        self.epochs.push(record);
        Ok(self.epochs.last().expect("just pushed"))
    }

    fn train_epoch(&mut self, centroids: Option<&CentroidSet<S>>, threshold: f64) -> Result<EpochRecord> {
        let batch_size = self.config.batch_size;
        let unlabeled = self.unlabeled_samples();

        // reliable set and mixing pool
        let mut reliable = Vec::new();
        if self.weights.delta != 0.0 {
            if let Some(c) = centroids {
                reliable = build_reliable_set(&self.model, c, &unlabeled, threshold)?;
            }
        }
        let pseudo_label_accuracy = (!reliable.is_empty()).then(|| {
            let hits = reliable
                .iter()
                .filter(|r| self.sample(r.id).class == r.pseudo_class)
                .count();
            hits as f64 / reliable.len() as f64
        });
        let mix_pool = MixPool::new(&reliable);
        let mix_modes: Vec<MixMode> = [(MixMode::Intra, Component::IntraMix), (MixMode::Inter, Component::InterMix)]
            .into_iter()
            .filter(|(m, c)| !self.ablation.contains(c) && mix_pool.available(*m))
            .map(|(m, _)| m)
            .collect();

        // labeled training set minus this epoch's validation holdout
        let labeled: Vec<(SampleId, usize)> = self.pool.labeled().iter().map(|(i, c)| (*i, *c)).collect();
        let n_val = (self.config.validation_fraction * labeled.len() as f64).floor() as usize;
        let held: BTreeSet<usize> = index::sample(&mut self.streams.validation, labeled.len(), n_val)
            .into_iter()
            .collect();
        let train: Vec<(&[S], usize)> = labeled
            .iter()
            .enumerate()
            .filter(|(i, _)| !held.contains(i))
            .map(|(_, (id, c))| (self.sample(*id).features.as_slice(), *c))
            .collect();
        let validation: Vec<Sample<S>> = held
            .iter()
            .map(|i| {
                let mut s = self.sample(labeled[*i].0).clone();
                s.class = labeled[*i].1;
                s
            })
            .collect();

        let steps = self
            .config
            .steps_per_epoch
            .unwrap_or_else(|| self.split.sources.len().div_ceil(batch_size));
        let mut labeled_cycle = Cycler::new(train.len());
        let use_ac = self.weights.ac != 0.0 && !unlabeled.is_empty();
        let mut unlabeled_cycle = Cycler::new(if use_ac { unlabeled.len() } else { 0 });

        let (lr_f, lr_h) = (S::lit(self.config.lr_feature), S::lit(self.config.lr_head));
        let mut sums = [0.0f64; 4];
        let mut done = 0usize;
        for _ in 0..steps {
            let lab: Vec<(&[S], usize)> = labeled_cycle
                .take(batch_size, &mut self.streams.batches)
                .into_iter()
                .map(|i| train[i])
                .collect();

            let (strong, targets) = if use_ac {
                let idx = unlabeled_cycle.take(batch_size, &mut self.streams.batches);
                let inputs: Vec<&[S]> = idx.iter().map(|i| unlabeled[*i].features.as_slice()).collect();
                let views = ConsistencyViews::draw(&inputs, &self.augmenter, &mut self.streams.augment);
                let targets = consistency_targets(&self.model, &views.weak, self.weights.tau)?;
                (views.strong, targets)
            } else {
                (Vec::new(), Vec::new())
            };

            let mut mixed: Vec<MixedSample<S>> = Vec::new();
            if self.weights.delta != 0.0 && !mix_modes.is_empty() {
                let per_mode: Vec<(MixMode, usize)> = if mix_modes.len() == 2 {
                    vec![(MixMode::Intra, batch_size / 2), (MixMode::Inter, batch_size - batch_size / 2)]
                } else {
                    vec![(mix_modes[0], batch_size)]
                };
                for (mode, count) in per_mode {
                    for _ in 0..count {
                        mixed.push(mix_pool.sample(
                            mode,
                            self.config.alpha,
                            self.split.num_classes,
                            &mut self.streams.mixup,
                        )?);
                    }
                }
            }

            if lab.is_empty() && strong.is_empty() && mixed.is_empty() {
                continue;
            }
            let loss = loss_ss(
                &self.model,
                SsBatch {
                    labeled: &lab,
                    strong: &strong,
                    targets: &targets,
                    mixed: &mixed,
                },
                self.weights,
            )?;
            self.model.sgd_step(&loss.grads, lr_f, lr_h)?;
            for (acc, v) in sums.iter_mut().zip([loss.ce, loss.ac, loss.eg, loss.total]) {
                *acc += v.as_f64();
            }
            done += 1;
        }
        let mean = |v: f64| if done == 0 { 0.0 } else { v / done as f64 };

        let source_val_accuracy = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&self.model, &validation)?)
        };

        Ok(EpochRecord {
            epoch: 0,
            threshold,
            reliable_size: reliable.len(),
            pseudo_label_accuracy,
            mix_modes,
            l_ce: mean(sums[0]),
            l_ac: mean(sums[1]),
            l_eg: mean(sums[2]),
            l_ss: mean(sums[3]),
            steps: done,
            discriminator_loss: None,
            queried: Vec::new(),
            labeled: 0,
            unlabeled: 0,
            spent: 0,
            source_val_accuracy,
            target_accuracy: 0.0,
        })
    }

    pub fn finish(self) -> RunReport {
        let final_target_accuracy = self.epochs.last().map_or(0.0, |e| e.target_accuracy);
        RunReport {
            variant: match self.config.strategy {
                QueryStrategy::Ceg => ablation_label(&self.ablation),
                QueryStrategy::Baseline(s) => format!(
                    "{s}+{}",
                    match self.config.baseline_loss {
                        BaselineLoss::Ce => "L_ce",
                        BaselineLoss::Ss => "L_ss",
                    }
                ),
            },
            strategy: self.config.strategy,
            ablation: self.ablation.iter().copied().collect(),
            loss: match self.config.strategy {
                QueryStrategy::Ceg => BaselineLoss::Ss,
                QueryStrategy::Baseline(_) => self.config.baseline_loss,
            },
            target_domain: self.split.target_domain,
            budget_total: self.pool.ledger().total(),
            budget_spent: self.pool.ledger().spent(),
            config: self.config,
            epochs: self.epochs,
            queries: self.queries,
            notes: self.notes,
            final_target_accuracy,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Runs the remaining epochs and produces the report.
    pub fn run(mut self) -> Result<RunReport> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.finish())
    }
}

/// Full collaborative exploration and generalization.
pub fn run_ceg<S: Scalar>(config: &TrainConfig, split: &DomainSplit<S>) -> Result<RunReport> {
    let config = TrainConfig {
        strategy: QueryStrategy::Ceg,
        ..config.clone()
    };
    Run::new(config, split, Ablation::new())?.run()
}

/// The same loop with a classic query strategy (`config.strategy`).
pub fn run_baseline<S: Scalar>(config: &TrainConfig, split: &DomainSplit<S>) -> Result<RunReport> {
    if config.strategy == QueryStrategy::Ceg {
        return Err(CegError::Config("run_baseline needs a baseline strategy".into()));
    }
    Run::new(config.clone(), split, Ablation::new())?.run()
}

/// CEG with the given components switched off.
pub fn run_ablation<S: Scalar>(config: &TrainConfig, split: &DomainSplit<S>, disabled: &Ablation) -> Result<RunReport> {
    let config = TrainConfig {
        strategy: QueryStrategy::Ceg,
        ..config.clone()
    };
    Run::new(config, split, disabled.clone())?.run()
}

/// Dispatches on `config.strategy`.
pub fn run_strategy<S: Scalar>(config: &TrainConfig, split: &DomainSplit<S>) -> Result<RunReport> {
    match config.strategy {
        QueryStrategy::Ceg => run_ceg(config, split),
        QueryStrategy::Baseline(_) => run_baseline(config, split),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, leave_one_domain_out, DomainSpec};
    use crate::math::ProbVec;

    fn toy_split(seed: u64) -> DomainSplit<f64> {
        let spec = DomainSpec {
            num_domains: 4,
            num_classes: 3,
            samples_per_domain: 60,
            ambient_dim: 6,
            rotation_angles_deg: vec![0.0, 15.0, 30.0, 45.0],
            seed,
            ..DomainSpec::default()
        };
        leave_one_domain_out(&generate(&spec).unwrap(), 3).unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 2,
            learn_epochs: 5,
            budget: 9,
            initial_budget: Some(4),
            hidden_width: 16,
            discriminator_hidden_width: 8,
            steps_per_epoch: Some(6),
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let split = toy_split(1);
        let bad = TrainConfig { pretrain_epochs: 5, ..toy_config() };
        assert!(matches!(Run::new(bad, &split, Ablation::new()), Err(CegError::Config(_))));
        let bad = TrainConfig { budget: 10_000, ..toy_config() };
        assert!(Run::new(bad, &split, Ablation::new()).is_err());
        let bad = TrainConfig { initial_budget: Some(20), ..toy_config() };
        assert!(Run::new(bad, &split, Ablation::new()).is_err());
        let bad = TrainConfig { lr_head: 0.0, ..toy_config() };
        assert!(Run::new(bad, &split, Ablation::new()).is_err());
    }

    #[test]
    fn quotas_split_the_remaining_budget() {
        let c = TrainConfig { pretrain_epochs: 2, learn_epochs: 6, budget: 11, initial_budget: Some(4), ..TrainConfig::default() };
        let q: Vec<usize> = (0..4).map(|r| c.round_quota(r)).collect();
        assert_eq!(q, vec![2, 2, 2, 1]);
        assert_eq!(q.iter().sum::<usize>(), 7);
    }

    #[test]
    fn exhausted_budget_never_queries() {
        let split = toy_split(2);
        let config = TrainConfig { budget: 6, initial_budget: Some(6), ..toy_config() };
        let report = run_ceg(&config, &split).unwrap();
        assert!(report.queries.is_empty());
        assert!(report.epochs.iter().all(|e| e.labeled == 6));
    }

    #[test]
    fn replay_is_deterministic() {
        let split = toy_split(3);
        let mut a = run_ceg(&toy_config(), &split).unwrap();
        let mut b = run_ceg(&toy_config(), &split).unwrap();
        a.wall_clock_secs = 0.0;
        b.wall_clock_secs = 0.0;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.epochs.len(), 5);
        assert_eq!(a.budget_spent, 9);
    }

    #[test]
    fn knowledge_grows_monotonically() {
        let split = toy_split(4);
        let report = run_ceg(&toy_config(), &split).unwrap();
        for w in report.epochs.windows(2) {
            assert!(w[1].labeled >= w[0].labeled);
            assert!(w[1].unlabeled <= w[0].unlabeled);
        }
        // queries only after pretraining
        assert!(report.queries.iter().all(|q| q.epoch > 2));
    }

    #[test]
    fn evaluate_cases() {
        let mut m = MlpParams::<f64>::zeros(MlpDims { input: 2, hidden: 2, output: 3 });
        m.b2 = vec![0.0, 5.0, 0.0];
        let samples: Vec<Sample<f64>> = (0..4).map(|i| Sample { id: i, domain: 0, class: 1, features: vec![i as f64, 0.0] }).collect();
        assert_eq!(evaluate(&m, &samples).unwrap(), 1.0);
        assert!(matches!(evaluate(&m, &[]), Err(CegError::Evaluation(_))));
        // all-tied logits predict class 0
        let z = MlpParams::<f64>::zeros(m.dims);
        let zero_class: Vec<Sample<f64>> = samples.iter().map(|s| Sample { class: 0, ..s.clone() }).collect();
        assert_eq!(evaluate(&z, &zero_class).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_matches_naive_loop() {
        let split = toy_split(5);
        let m = MlpParams::<f64>::init(MlpDims { input: 6, hidden: 8, output: 3 }, &mut RngStream::new(5, "e")).unwrap();
        let mut hits = 0;
        for s in &split.target {
            let p: ProbVec<f64> = m.predict(&s.features).unwrap();
            let mut best = 0;
            for h in 1..3 {
                if p[h] > p[best] {
                    best = h;
                }
            }
            hits += usize::from(best == s.class);
        }
        assert_eq!(evaluate(&m, &split.target).unwrap(), hits as f64 / split.target.len() as f64);
    }

    #[test]
    fn static_threshold_is_logged_constant() {
        let split = toy_split(6);
        let disabled: Ablation = [Component::DynamicThreshold].into_iter().collect();
        let report = run_ablation(&toy_config(), &split, &disabled).unwrap();
        assert!(report.epochs.iter().all(|e| e.threshold == 0.5));
        let dynamic = run_ceg(&toy_config(), &split).unwrap();
        assert!(dynamic.epochs[0].threshold < dynamic.epochs[4].threshold);
        assert_eq!(dynamic.epochs[4].threshold, 0.5);
    }

    #[test]
    fn disabling_unsupervised_terms_leaves_cross_entropy() {
        let split = toy_split(7);
        let disabled: Ablation = [Component::Consistency, Component::Expansion].into_iter().collect();
        let report = run_ablation(&toy_config(), &split, &disabled).unwrap();
        for e in &report.epochs {
            assert_eq!(e.l_ss, e.l_ce);
            assert_eq!(e.l_ac, 0.0);
            assert_eq!(e.l_eg, 0.0);
        }
    }

    #[test]
    fn all_scores_disabled_falls_back_to_uniform() {
        let split = toy_split(8);
        let disabled: Ablation = [Component::Uncertainty, Component::Representativeness, Component::Diversity]
            .into_iter()
            .collect();
        let report = run_ablation(&toy_config(), &split, &disabled).unwrap();
        assert!(report.notes.iter().any(|n| n.contains("uniform")));
        assert_eq!(report.budget_spent, 9);
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in ["ceg", "uniform", "entropy", "bvsb", "confidence", "coreset"] {
            let s: QueryStrategy = name.parse().unwrap();
            assert_eq!(s.to_string(), name);
        }
        assert!("fixmatch".parse::<QueryStrategy>().is_err());
        assert!("S_q".parse::<Component>().is_err());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::default());
    }
}
