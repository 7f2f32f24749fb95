use ceg::datagen::{generate, leave_one_domain_out, DomainSpec};
use ceg::exploration::farthest_first;
use ceg::model::{MlpDims, MlpParams};
use ceg::pools::Sample;
use ceg::trainer::Run;
use ceg::{
    evaluate, run_ablation, run_baseline, run_ceg, Ablation, BaselineLoss, Component, QueryStrategy, RngStream, Split,
    Strategy, TrainConfig,
};

fn split(num_classes: usize, seed: u64) -> Split {
    let spec = DomainSpec {
        num_domains: 4,
        num_classes,
        samples_per_domain: 60,
        ambient_dim: 6,
        seed,
        ..DomainSpec::default()
    };
    leave_one_domain_out(&generate(&spec).unwrap(), 0).unwrap()
}

fn config(strategy: QueryStrategy, seed: u64) -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 2,
        learn_epochs: 5,
        budget: 24,
        initial_budget: Some(6),
        hidden_width: 12,
        discriminator_hidden_width: 6,
        steps_per_epoch: Some(5),
        strategy,
        seed,
        ..TrainConfig::default()
    }
}

fn queried(report: &ceg::RunReport) -> Vec<Vec<u64>> {
    report.queries.iter().map(|q| q.ids.clone()).collect()
}

#[test]
fn uniform_baseline_replays_identically() {
    let s = split(3, 1);
    let c = config(QueryStrategy::Baseline(Strategy::Uniform), 7);
    let a = run_baseline(&c, &s).unwrap();
    let b = run_baseline(&c, &s).unwrap();
    assert_eq!(queried(&a), queried(&b));
    assert_eq!(a.final_target_accuracy, b.final_target_accuracy);
    let other = run_baseline(&TrainConfig { seed: 8, ..c }, &s).unwrap();
    assert_ne!(queried(&a), queried(&other));
}

#[test]
fn entropy_and_bvsb_coincide_for_two_classes() {
    let s = split(2, 2);
    let e = run_baseline(&config(QueryStrategy::Baseline(Strategy::Entropy), 3), &s).unwrap();
    let b = run_baseline(&config(QueryStrategy::Baseline(Strategy::Bvsb), 3), &s).unwrap();
    let sorted = |r: &ceg::RunReport| {
        queried(r)
            .into_iter()
            .map(|mut v| {
                v.sort_unstable();
                v
            })
            .collect::<Vec<_>>()
    };
    assert!(!e.queries.is_empty());
    assert_eq!(sorted(&e), sorted(&b));
}

#[test]
fn coreset_run_matches_standalone_trace() {
    let s = split(3, 3);
    let c = config(QueryStrategy::Baseline(Strategy::Coreset), 4);
    let mut run = Run::new(c.clone(), &s, Ablation::new()).unwrap();
    let by_id = |id: u64| s.sources.iter().find(|x| x.id == id).unwrap();
    let mut rounds = 0;
    while !run.is_finished() {
        let expected = if run.queries_next_epoch() {
            let round = run.epoch() - c.pretrain_epochs;
            let covered: Vec<Vec<f64>> = run
                .pool()
                .labeled()
                .keys()
                .map(|id| run.model().features(&by_id(*id).features).unwrap())
                .collect();
            let candidates: Vec<(u64, Vec<f64>)> = run
                .pool()
                .unlabeled()
                .iter()
                .map(|id| (*id, run.model().features(&by_id(*id).features).unwrap()))
                .collect();
            Some(farthest_first(&covered, &candidates, c.round_quota(round)).ids)
        } else {
            None
        };
        let record = run.step().unwrap();
        if let Some(ids) = expected {
            assert_eq!(record.queried, ids);
            rounds += 1;
        }
    }
    assert_eq!(rounds, 3);
}

#[test]
fn uncertainty_only_ablation_equals_bvsb_baseline() {
    let s = split(3, 4);
    let disabled: Ablation = [Component::Representativeness, Component::Diversity].into_iter().collect();
    let ablated = run_ablation(&config(QueryStrategy::Ceg, 5), &s, &disabled).unwrap();
    let bvsb = run_baseline(
        &TrainConfig {
            baseline_loss: BaselineLoss::Ss,
            ..config(QueryStrategy::Baseline(Strategy::Bvsb), 5)
        },
        &s,
    )
    .unwrap();
    assert_eq!(queried(&ablated), queried(&bvsb));
    assert_eq!(ablated.final_target_accuracy, bvsb.final_target_accuracy);
}

#[test]
fn full_run_spends_the_whole_budget_and_records_every_epoch() {
    let s = split(3, 5);
    let report = run_ceg(&config(QueryStrategy::Ceg, 6), &s).unwrap();
    assert_eq!(report.epochs.len(), 5);
    assert_eq!(report.budget_spent, 24);
    assert_eq!(report.queries.iter().map(|q| q.ids.len()).collect::<Vec<_>>(), vec![6, 6, 6]);
    assert!(report.epochs.iter().skip(1).any(|e| e.reliable_size > 0));
    assert!(report.epochs.iter().all(|e| e.discriminator_loss.is_some()));
    let json = serde_json::to_string(&report).unwrap();
    let back: ceg::RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn single_precision_run_completes() {
    let spec = DomainSpec {
        num_domains: 3,
        samples_per_domain: 45,
        ambient_dim: 5,
        rotation_angles_deg: vec![0.0, 20.0, 40.0],
        ..DomainSpec::default()
    };
    let data = generate::<f32>(&spec).unwrap();
    let s = leave_one_domain_out(&data, 2).unwrap();
    let c = TrainConfig {
        budget: 30,
        ..config(QueryStrategy::Ceg, 1)
    };
    let report = run_ceg(&c, &s).unwrap();
    assert_eq!(report.budget_spent, 30);
    assert!((0.0..=1.0).contains(&report.final_target_accuracy));
}

#[test]
fn untrained_model_on_random_labels_is_at_chance() {
    let mut rng = RngStream::new(9, "labels");
    let model = MlpParams::<f64>::init(MlpDims { input: 4, hidden: 16, output: 4 }, &mut RngStream::new(9, "m")).unwrap();
    let samples: Vec<Sample<f64>> = (0..10_000)
        .map(|i| {
            use rand::Rng;
            Sample {
                id: i,
                domain: 0,
                class: rng.random_range(0..4),
                features: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    let acc = evaluate(&model, &samples).unwrap();
    assert!((acc - 0.25).abs() < 0.05, "accuracy {acc}");
}
