use std::sync::{Arc, Mutex};

use dpfed_core::dp::DpConfig;
use dpfed_core::model::{synth_dataset, Architecture, Dataset};
use dpfed_core::orchestrator::{run, Aggregation, Method, RunConfig};
use dpfed_core::rng::{stream, Stream};
use dpfed_core::secure_agg::{
    contains_secret_key, SecureAggConfig, SecureAggregator, TransportKind,
};
use dpfed_he::EncryptionParams;
use rand::Rng;

fn data() -> (Dataset, Dataset) {
    synth_dataset(900, 6, 3, 3.0, 12)
        .unwrap()
        .split_at(700)
        .unwrap()
}

fn config(aggregation: Aggregation) -> RunConfig {
    let dp = DpConfig {
        q: 0.2,
        sigma: 1.0,
        clip_norm: 1.0,
        learning_rate: 0.05,
        momentum: 0.5,
        max_rounds: 4,
        epsilon: f64::INFINITY,
        delta: 1e-4,
        hospitals: 5,
    };
    let mut cfg = RunConfig::new(
        Method::Dopamine,
        dp,
        Architecture::Logistic {
            features: 6,
            classes: 3,
        },
        31,
    );
    cfg.aggregation = aggregation;
    cfg
}

fn secure(transport: TransportKind) -> SecureAggConfig {
    SecureAggConfig {
        params: EncryptionParams::default(),
        transport,
        ..SecureAggConfig::default()
    }
}

#[test]
fn audited_secure_rounds_track_plaintext() {
    let (train, test) = data();
    let cfg = config(Aggregation::PlaintextAudit(SecureAggConfig::default()));
    let out = run(&cfg, &train, &test).unwrap();
    assert_eq!(out.metrics.len(), 4);
    for m in &out.metrics {
        let gap = m.audit_deviation.unwrap();
        assert!(gap <= 5e-4, "round {} gap {gap}", m.round);
    }
    let plain = run(&config(Aggregation::Plain), &train, &test).unwrap();
    for (a, b) in out.model.values().iter().zip(plain.model.values()) {
        assert!((a - b).abs() <= 4.0 * 5e-4);
    }
}

#[test]
fn tcp_and_loopback_agree() {
    let k = 3;
    let mut rng = stream(5, Stream::Dataset);
    let arch = Architecture::Logistic {
        features: 4,
        classes: 2,
    };
    let models: Vec<_> = (0..k)
        .map(|_| {
            let m = arch.init(&mut rng);
            m.with_values(
                m.values()
                    .iter()
                    .map(|_| rng.random_range(-0.5..0.5))
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let mut results = Vec::new();
    for transport in [TransportKind::Loopback, TransportKind::Tcp] {
        let mut agg = SecureAggregator::new(k, secure(transport), 77).unwrap();
        agg.broadcast_initial(&models[0]).unwrap();
        let local: Vec<_> = models.iter().enumerate().collect();
        let a = agg.aggregate(&local).unwrap();
        let bytes = agg.server_state().snapshot();
        results.push((a, bytes));
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn server_never_holds_the_secret_key() {
    let mut agg = SecureAggregator::new(3, secure(TransportKind::Loopback), 4).unwrap();
    let sk = agg.hospital_secret_key(0).unwrap().clone();
    let params = EncryptionParams::default();
    let leaks = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&leaks);
    agg.set_audit(Box::new(move |step, state| {
        seen.lock().unwrap().push((
            step.to_string(),
            contains_secret_key(&state.snapshot(), &sk, &params),
        ));
    }));
    let arch = Architecture::Logistic {
        features: 3,
        classes: 2,
    };
    let m = arch.init(&mut stream(1, Stream::ModelInit));
    agg.broadcast_initial(&m).unwrap();
    for _ in 0..3 {
        agg.aggregate(&[(0, &m), (1, &m), (2, &m)]).unwrap();
    }
    let log = leaks.lock().unwrap();
    assert!(!log.is_empty());
    assert!(log.iter().all(|(_, leaked)| !leaked), "{log:?}");
}
