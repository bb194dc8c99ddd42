use dpfed_core::dp::DpConfig;
use dpfed_core::model::{synth_dataset, Architecture, Dataset};
use dpfed_core::orchestrator::{run, Method, RunConfig, RunOutcome};

fn data() -> (Dataset, Dataset) {
    synth_dataset(500, 5, 3, 2.5, 17)
        .unwrap()
        .split_at(400)
        .unwrap()
}

fn arch() -> Architecture {
    Architecture::Mlp {
        features: 5,
        hidden: 6,
        classes: 3,
    }
}

fn base(k: usize) -> DpConfig {
    DpConfig {
        q: 0.25,
        sigma: 1.1,
        clip_norm: 0.8,
        learning_rate: 0.15,
        momentum: 0.9,
        max_rounds: 12,
        epsilon: f64::INFINITY,
        delta: 1e-4,
        hospitals: k,
    }
}

fn outcome(cfg: &RunConfig) -> RunOutcome {
    let (train, test) = data();
    run(cfg, &train, &test).unwrap()
}

fn assert_same_trajectory(a: &RunOutcome, b: &RunOutcome) {
    assert_eq!(a.snapshots.len(), b.snapshots.len());
    assert_eq!(a.snapshots, b.snapshots);
    for (x, y) in a.model.values().iter().zip(b.model.values()) {
        assert!((x - y).abs() <= 1e-10);
    }
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert!((x.test_accuracy - y.test_accuracy).abs() <= 1e-10);
        assert!((x.train_loss - y.train_loss).abs() <= 1e-10);
    }
}

#[test]
fn single_hospital_dopamine_is_cdp() {
    let d = outcome(&RunConfig::new(Method::Dopamine, base(1), arch(), 4));
    let c = outcome(&RunConfig::new(Method::Cdp, base(1), arch(), 4));
    assert_same_trajectory(&d, &c);
    let eps = |o: &RunOutcome| {
        o.metrics
            .iter()
            .map(|m| m.epsilon_hat.unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(eps(&d), eps(&c));
}

#[test]
fn single_hospital_fedavg_is_centralized() {
    let mut f = RunConfig::new(Method::F, base(1), arch(), 6);
    f.fedavg_local_epochs = 1;
    f.participation_fraction = 1.0;
    let c = RunConfig::new(Method::C, base(1), arch(), 6);
    assert_same_trajectory(&outcome(&f), &outcome(&c));
}

#[test]
fn noiseless_unclipped_cdp_is_centralized_full_batch() {
    let mut dp = base(1);
    dp.q = 1.0;
    dp.sigma = 0.0;
    dp.clip_norm = f64::INFINITY;
    let cdp = outcome(&RunConfig::new(Method::Cdp, dp.clone(), arch(), 8));
    let c = outcome(&RunConfig::new(Method::C, dp, arch(), 8));
    assert_eq!(cdp.stopped_at, None);
    assert_same_trajectory(&cdp, &c);
}

#[test]
fn single_hospital_fpdp_is_cdp_per_step() {
    let mut dp = base(1);
    dp.q = 1.0;
    let mut f = RunConfig::new(Method::Fpdp, dp.clone(), arch(), 2);
    f.fedavg_local_epochs = 1;
    let fpdp = outcome(&f);
    let cdp = outcome(&RunConfig::new(Method::Cdp, dp, arch(), 2));
    assert_same_trajectory(&fpdp, &cdp);
    for (a, b) in fpdp.metrics.iter().zip(&cdp.metrics) {
        let (a, b) = (a.epsilon_hat.unwrap(), b.epsilon_hat.unwrap());
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn dp_rounds_stop_before_the_budget_breaks() {
    let mut dp = base(4);
    dp.epsilon = 2.0;
    dp.max_rounds = 500;
    let out = outcome(&RunConfig::new(Method::Dopamine, dp, arch(), 1));
    let t = out.stopped_at.expect("budget must bind");
    assert_eq!(out.metrics.len(), t - 1);
    assert_eq!(out.model.digest(), out.snapshots[t - 1]);
    assert!(out.spend.unwrap().epsilon_hat <= 2.0);
    for w in out.metrics.windows(2) {
        assert!(w[1].epsilon_hat >= w[0].epsilon_hat);
    }
}
