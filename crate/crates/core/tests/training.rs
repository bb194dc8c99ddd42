use dpfed_core::dp::DpConfig;
use dpfed_core::model::{
    evaluate, loss_and_per_sample_grads, synth_dataset, Architecture, LabeledSample, ModelParams,
};
use dpfed_core::orchestrator::{run, Method, RunConfig};
use dpfed_core::rng::{stream, Stream};
use rand::Rng;

fn fd_check(arch: Architecture, seed: u64) {
    let mut rng = stream(seed, Stream::ModelInit);
    let model = arch.init(&mut rng);
    let model = model
        .with_values(
            model
                .values()
                .iter()
                .map(|v| v + rng.random_range(-0.5..0.5))
                .collect(),
        )
        .unwrap();
    let sample = LabeledSample {
        features: (0..arch.num_features())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
        label: rng.random_range(0..arch.num_classes()),
    };
    let batch = [sample];
    let (_, grads) = loss_and_per_sample_grads(&model, &batch).unwrap();
    let loss_at = |w: Vec<f64>| -> f64 {
        let m: ModelParams = model.with_values(w).unwrap();
        loss_and_per_sample_grads(&m, &batch).unwrap().0
    };
    let h = 1e-5;
    let g = grads[0].values();
    let mut fd = Vec::with_capacity(g.len());
    for i in 0..model.len() {
        let mut up = model.values().to_vec();
        let mut down = up.clone();
        up[i] += h;
        down[i] -= h;
        fd.push((loss_at(up) - loss_at(down)) / (2.0 * h));
    }
    let diff = g
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = fd.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    assert!(
        diff / scale <= 1e-6,
        "relative gradient error {}",
        diff / scale
    );
}

#[test]
fn gradients_match_central_differences() {
    for seed in 0..20 {
        fd_check(
            Architecture::Logistic {
                features: 6,
                classes: 4,
            },
            seed,
        );
        fd_check(
            Architecture::Mlp {
                features: 5,
                hidden: 7,
                classes: 3,
            },
            100 + seed,
        );
    }
}

#[test]
fn centralized_sgd_learns_separated_blobs() {
    let (train, test) = synth_dataset(2000, 8, 4, 6.0, 21)
        .unwrap()
        .split_at(1500)
        .unwrap();
    let dp = DpConfig {
        q: 0.05,
        learning_rate: 0.05,
        max_rounds: 20,
        hospitals: 1,
        ..DpConfig::default()
    };
    let arch = Architecture::Logistic {
        features: 8,
        classes: 4,
    };
    let out = run(&RunConfig::new(Method::C, dp, arch, 3), &train, &test).unwrap();
    let last = out.metrics.last().unwrap();
    assert!(
        last.test_accuracy >= 0.95,
        "accuracy {}",
        last.test_accuracy
    );
    assert_eq!(
        evaluate(&out.model, &test).unwrap().accuracy,
        last.test_accuracy
    );
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.train_loss).collect();
    let moving: Vec<f64> = losses
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    for w in moving.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "moving mean loss rose: {moving:?}");
    }
}
