//! Labeled/unlabeled pool bookkeeping, the simulated label oracle and the
//! annotation budget ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{CegError, Result};
use crate::rng::RngStream;

pub type SampleId = u64;

/// A feature vector with its domain index and hidden ground-truth class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample<S> {
    pub id: SampleId,
    #[serde(rename = "domain")]
    pub domain: usize,
    #[serde(rename = "class")]
    pub class: usize,
    #[serde(rename = "x")]
    pub features: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    total: usize,
    initial: usize,
    spent: usize,
}

impl BudgetLedger {
    pub fn new(total: usize, initial: usize) -> Result<Self> {
        if initial > total {
            return Err(CegError::Budget(format!(
                "initial budget {initial} exceeds total budget {total}"
            )));
        }
        Ok(Self {
            total,
            initial,
            spent: 0,
        })
    }

    /// Ledger whose initial budget is half the total, rounded down.
    pub fn with_half_initial(total: usize) -> Self {
        Self {
            total,
            initial: total / 2,
            spent: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn spent(&self) -> usize {
        self.spent
    }

    pub fn remaining(&self) -> usize {
        self.total - self.spent
    }

    fn check_spend(&self, n: usize) -> Result<()> {
        if self.spent + n > self.total {
            return Err(CegError::Budget(format!(
                "spending {n} with {} of {} already spent",
                self.spent, self.total
            )));
        }
        Ok(())
    }
}

/// Holds the hidden classes and records every id whose class was revealed.
#[derive(Debug, Clone)]
pub struct LabelOracle {
    hidden: BTreeMap<SampleId, usize>,
    revealed: BTreeSet<SampleId>,
}

impl LabelOracle {
    pub fn new<S>(samples: &[Sample<S>]) -> Result<Self> {
        let mut hidden = BTreeMap::new();
        for s in samples {
            if hidden.insert(s.id, s.class).is_some() {
                return Err(CegError::Consistency(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            hidden,
            revealed: BTreeSet::new(),
        })
    }

    fn reveal(&mut self, id: SampleId) -> Result<usize> {
        let class = *self.hidden.get(&id).ok_or(CegError::UnknownSample(id))?;
        self.revealed.insert(id);
        Ok(class)
    }

    pub fn revealed(&self) -> &BTreeSet<SampleId> {
        &self.revealed
    }
}

/// Disjoint labeled and unlabeled id sets plus the budget ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    labeled: BTreeMap<SampleId, usize>,
    unlabeled: BTreeSet<SampleId>,
    ledger: BudgetLedger,
}

impl PoolState {
    /// Reveals `ledger.initial()` ids drawn uniformly without replacement from
    /// all samples.
    pub fn init<S>(
        samples: &[Sample<S>],
        mut ledger: BudgetLedger,
        oracle: &mut LabelOracle,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let k = ledger.initial();
        if k > samples.len() {
            return Err(CegError::Budget(format!(
                "initial budget {k} exceeds dataset size {}",
                samples.len()
            )));
        }
        let mut ids: Vec<SampleId> = samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        let unique = ids.len();
        ids.dedup();
        if ids.len() != unique {
            return Err(CegError::Consistency("duplicate sample ids".into()));
        }
        let chosen: BTreeSet<SampleId> = index::sample(rng, ids.len(), k)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        let mut labeled = BTreeMap::new();
        for id in &chosen {
            labeled.insert(*id, oracle.reveal(*id)?);
        }
        let unlabeled = ids.into_iter().filter(|id| !chosen.contains(id)).collect();
        ledger.spent = k;
        Ok(Self {
            labeled,
            unlabeled,
            ledger,
        })
    }

    /// Moves `ids` to the labeled set. Nothing changes on error.
    pub fn query(&mut self, ids: &[SampleId], oracle: &mut LabelOracle) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in ids {
            if self.labeled.contains_key(id) || !seen.insert(*id) {
                return Err(CegError::DoubleQuery(*id));
            }
            if !self.unlabeled.contains(id) {
                return Err(CegError::UnknownSample(*id));
            }
        }
        self.ledger.check_spend(ids.len())?;
        for id in ids {
            let class = oracle.reveal(*id)?;
            self.unlabeled.remove(id);
            self.labeled.insert(*id, class);
        }
        self.ledger.spent += ids.len();
        Ok(())
    }

    pub fn labeled(&self) -> &BTreeMap<SampleId, usize> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<SampleId> {
        &self.unlabeled
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// One query round as written to the append-only query log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub epoch: usize,
    pub ids: Vec<SampleId>,
    /// Selection score of each queried id (fused rank for the full method,
    /// the strategy's own score for baselines).
    pub scores: Vec<f64>,
    pub spent: usize,
}

pub fn append_query_log(path: &Path, record: &QueryRecord) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn samples(n: usize) -> Vec<Sample<f64>> {
        (0..n)
            .map(|i| Sample {
                id: i as SampleId * 3 + 1,
                domain: i % 2,
                class: i % 3,
                features: vec![i as f64],
            })
            .collect()
    }

    fn fresh(n: usize, total: usize, initial: usize, seed: u64) -> (PoolState, LabelOracle) {
        let data = samples(n);
        let mut oracle = LabelOracle::new(&data).unwrap();
        let pool = PoolState::init(
            &data,
            BudgetLedger::new(total, initial).unwrap(),
            &mut oracle,
            &mut RngStream::new(seed, "init"),
        )
        .unwrap();
        (pool, oracle)
    }

    #[test]
    fn init_edge_cases() {
        let (pool, _) = fresh(20, 5, 0, 1);
        assert!(pool.labeled().is_empty());
        assert_eq!(pool.unlabeled().len(), 20);

        let (pool, _) = fresh(20, 20, 20, 1);
        assert_eq!(pool.labeled().len(), 20);
        assert!(pool.unlabeled().is_empty());
        assert_eq!(pool.ledger().spent(), 20);

        let data = samples(4);
        let mut oracle = LabelOracle::new(&data).unwrap();
        let err = PoolState::init(
            &data,
            BudgetLedger::new(10, 5).unwrap(),
            &mut oracle,
            &mut RngStream::new(0, "init"),
        );
        assert!(matches!(err, Err(CegError::Budget(_))));
        assert!(BudgetLedger::new(3, 4).is_err());
    }

    #[test]
    fn init_is_deterministic_and_reveals_truth() {
        let (a, oracle) = fresh(100, 20, 10, 42);
        let (b, _) = fresh(100, 20, 10, 42);
        assert_eq!(a, b);
        assert_eq!(a.labeled().len(), 10);
        let data = samples(100);
        for (id, class) in a.labeled() {
            let s = data.iter().find(|s| s.id == *id).unwrap();
            assert_eq!(s.class, *class);
        }
        assert_eq!(oracle.revealed().len(), 10);
    }

    #[test]
    fn half_initial_budget_rounds_down() {
        assert_eq!(BudgetLedger::with_half_initial(9).initial(), 4);
    }

    #[test]
    fn query_moves_ids_and_rejects_errors_atomically() {
        let (mut pool, mut oracle) = fresh(10, 6, 2, 3);
        pool.query(&[], &mut oracle).unwrap();
        let unl: Vec<SampleId> = pool.unlabeled().iter().copied().collect();
        let labeled_id = *pool.labeled().keys().next().unwrap();

        let before = pool.clone();
        assert!(matches!(
            pool.query(&[unl[0], labeled_id], &mut oracle),
            Err(CegError::DoubleQuery(_))
        ));
        assert!(matches!(
            pool.query(&[unl[0], unl[0]], &mut oracle),
            Err(CegError::DoubleQuery(_))
        ));
        assert!(matches!(pool.query(&[9999], &mut oracle), Err(CegError::UnknownSample(_))));
        // B + 1: 2 spent, 5 more would overflow a budget of 6
        assert!(matches!(pool.query(&unl[..5], &mut oracle), Err(CegError::Budget(_))));
        assert_eq!(pool, before);

        pool.query(&unl[..4], &mut oracle).unwrap();
        assert_eq!(pool.ledger().spent(), 6);
        assert_eq!(pool.ledger().remaining(), 0);
        assert_eq!(pool.labeled().len(), 6);
    }

    #[test]
    fn exhausting_the_pool() {
        let (mut pool, mut oracle) = fresh(12, 12, 4, 5);
        let rest: Vec<SampleId> = pool.unlabeled().iter().copied().collect();
        pool.query(&rest, &mut oracle).unwrap();
        assert!(pool.unlabeled().is_empty());
    }

    #[test]
    fn query_log_appends_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        for epoch in 0..3 {
            let rec = QueryRecord {
                epoch,
                ids: vec![epoch as u64, 7],
                scores: vec![1.5, 2.0],
                spent: 2 * epoch,
            };
            append_query_log(&path, &rec).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let recs: Vec<QueryRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].ids, vec![2, 7]);
    }

    proptest! {
        #[test]
        fn random_query_sequences_preserve_invariants(seed in 0u64..10_000, n in 5usize..40) {
            let total = n / 2 + 1;
            let (mut pool, mut oracle) = fresh(n, total, total / 2, seed);
            let mut rng = RngStream::new(seed, "ops");
            for _ in 0..20 {
                let all: Vec<SampleId> = samples(n).iter().map(|s| s.id).collect();
                let k = rng.random_range(0..4usize);
                let ids: Vec<SampleId> = (0..k).map(|_| all[rng.random_range(0..all.len())]).collect();
                let before = pool.clone();
                if pool.query(&ids, &mut oracle).is_err() {
                    prop_assert_eq!(&pool, &before);
                }
                prop_assert!(pool.ledger().spent() <= pool.ledger().total());
                prop_assert_eq!(pool.total(), n);
                prop_assert!(pool.labeled().keys().all(|id| !pool.unlabeled().contains(id)));
                prop_assert_eq!(pool.labeled().len(), pool.ledger().spent());
                prop_assert!(oracle.revealed().iter().all(|id| pool.labeled().contains_key(id)));
            }
        }
    }
}
