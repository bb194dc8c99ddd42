use dpfed_core::accountant::epsilon_curve;
use dpfed_core::dp::{clip_gradient, momentum_step, MomentumState};
use dpfed_core::model::{LayerShape, ModelParams, PerSampleGradient};
use dpfed_core::secure_agg::wire::{decode_model, encode_model, MessageType, RoundMessage};
use dpfed_core::secure_agg::{fixed_point, flatten, unflatten};
use dpfed_he::EncryptionParams;
use proptest::collection::vec;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipping_bounds_the_norm(g in vec(-50.0f64..50.0, 1..40), c in 0.01f64..10.0) {
        let clipped = clip_gradient(&PerSampleGradient(g.clone()), c).unwrap();
        prop_assert!(clipped.norm() <= c * (1.0 + 1e-12));
        let n = PerSampleGradient(g.clone()).norm();
        if n <= c {
            prop_assert_eq!(clipped.values(), &g[..]);
        }
    }

    #[test]
    fn momentum_commutes_with_averaging(
        grads in vec(vec(vec(-5.0f64..5.0, 8), 4), 1..30),
        beta in 0.0f64..0.99,
    ) {
        let mut each = vec![MomentumState::new(8); 4];
        let mut avg_state = MomentumState::new(8);
        for round in &grads {
            for (m, g) in each.iter_mut().zip(round) {
                *m = momentum_step(m, g, beta).unwrap();
            }
            let avg: Vec<f64> = (0..8).map(|j| round.iter().map(|g| g[j]).sum::<f64>() / 4.0).collect();
            avg_state = momentum_step(&avg_state, &avg, beta).unwrap();
        }
        for j in 0..8 {
            let mean = each.iter().map(|m| m.buffer[j]).sum::<f64>() / 4.0;
            prop_assert!((mean - avg_state.buffer[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn model_codec_is_byte_exact(values in vec(any::<f64>(), 6), round in any::<u32>(), sender in any::<u16>()) {
        let m = ModelParams::new(values, vec![LayerShape::new("w", &[2, 2]), LayerShape::new("b", &[2])]).unwrap();
        let bytes = encode_model(&m);
        prop_assert_eq!(encode_model(&decode_model(&bytes).unwrap()), bytes.clone());
        let msg = RoundMessage::new(MessageType::ModelBroadcast, round, sender, bytes);
        let wire = msg.to_bytes();
        prop_assert_eq!(RoundMessage::from_bytes(&wire).unwrap().to_bytes(), wire);
    }

    #[test]
    fn fixed_point_error_is_half_a_step(values in vec(-2.0f64..2.0, 1..200)) {
        let fp = fixed_point(&EncryptionParams::default(), 10);
        let n = values.len();
        let m = ModelParams::new(values, vec![LayerShape::new("w", &[n])]).unwrap();
        let (ints, shape) = flatten(&m, &fp).unwrap();
        let back = unflatten(&ints, shape, &fp).unwrap();
        for (a, b) in m.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 5e-4 + 1e-12);
        }
    }

    #[test]
    fn epsilon_grows_with_rounds(q in 0.01f64..1.0, sigma in 0.6f64..4.0) {
        let curve = epsilon_curve(q, sigma, 1e-5, 40).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1].epsilon_hat >= w[0].epsilon_hat);
        }
    }
}
