use proptest::prelude::*;
use rand::SeedableRng;

use ewa_core::ewa::{contraction_factor, expert_mean, expert_spread};
use ewa_core::moe::capacity;
use ewa_core::train::{cosine_lr, Checkpoint, DatasetSpec, SyntheticSpec};
use ewa_core::{
    build_ewa_model, convert_moe_to_ffn, ewa_step, expand_ffn_to_moe, moe_topk_forward, rup_partition, schedule_beta,
    FFNParams, Granularity, MoELayer, MoeMode, Mode, Placement, Rng, ShareSchedule, Tensor, ViTConfig,
};

fn experts(n: usize, d: usize, h: usize, seed: u64) -> Vec<FFNParams> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..n).map(|_| FFNParams::random(d, h, &mut rng)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_a_balanced_cover(t in 1usize..200, n in 1usize..16, seed in any::<u64>()) {
        prop_assume!(t >= n);
        let mut rng = Rng::seed_from_u64(seed);
        let p = rup_partition(t, n, &mut rng).unwrap();
        let sizes = p.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), t);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = vec![0; t];
        for (e, list) in p.token_lists.iter().enumerate() {
            for &tok in list {
                seen[tok] += 1;
                prop_assert_eq!(p.expert_of_token[tok], e);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn repeated_mixing_compounds_the_contraction(
        n in 2usize..6, beta in 0.0f64..0.5, steps in 1usize..6, seed in any::<u64>()
    ) {
        let mut e = experts(n, 3, 5, seed);
        let spread0 = expert_spread(&e);
        let mean0 = expert_mean(&e);
        for _ in 0..steps {
            e = ewa_step(&e, beta).unwrap();
        }
        let want = contraction_factor(beta, n).abs().powi(steps as i32) * spread0;
        prop_assert!((expert_spread(&e) - want).abs() <= 1e-12 * (1.0 + spread0));
        for (a, b) in expert_mean(&e).iter().zip(&mean0) {
            prop_assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn conversion_is_the_mean_and_expansion_inverts_it(n in 1usize..6, seed in any::<u64>()) {
        let e = experts(n, 2, 4, seed);
        let layer = MoELayer { experts: e.clone(), routing: ewa_core::Routing::Rup };
        let ffn = convert_moe_to_ffn(&layer).unwrap();
        let mean = expert_mean(&e);
        for (a, b) in ffn.flatten().iter().zip(&mean) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
        let mut rng = Rng::seed_from_u64(seed ^ 1);
        let back = expand_ffn_to_moe(&ffn, n, &MoeMode::Rup, &mut rng).unwrap();
        prop_assert_eq!(convert_moe_to_ffn(&back).unwrap(), ffn);
    }

    #[test]
    fn share_rate_stays_in_range(
        rate in 0.0f64..1.0, horizon in 1u64..500, pos in 0u64..1000, linear in any::<bool>(), early in any::<bool>()
    ) {
        let mut s = if linear {
            ShareSchedule::linear(rate, horizon, Granularity::Step)
        } else {
            ShareSchedule::constant(rate, horizon, Granularity::Step)
        };
        if early {
            s.early_cutoff_fraction = 0.5;
        }
        let b = schedule_beta(&s, pos);
        prop_assert!((0.0..=rate).contains(&b));
        if early && pos as f64 >= 0.5 * horizon as f64 {
            prop_assert_eq!(b, 0.0);
        }
        if linear && !early && pos < horizon {
            prop_assert!(schedule_beta(&s, pos + 1) >= b);
        }
    }

    #[test]
    fn learning_rate_stays_in_range(step in 0u64..2000, total in 1u64..1000, warmup in 0u64..200, lr in 1e-5f64..1.0) {
        let v = cosine_lr(step, total, warmup, lr);
        prop_assert!(v >= 0.0 && v <= lr * (1.0 + 1e-12));
    }

    #[test]
    fn routed_dispatch_respects_capacity(
        t in 4usize..48, n in 2usize..6, c in 0.5f64..2.0, seed in any::<u64>()
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let mode = MoeMode::TopK { k: 1, capacity_ratio: c, balance_weight: 0.01 };
        let layer = MoELayer::random(4, 6, n, &mode, &mut rng).unwrap();
        let x = Tensor::randn(vec![t, 4], 2.0, &mut rng);
        let (y, aux, stats) = moe_topk_forward(&layer, &x, Mode::Train).unwrap();
        let cap = capacity(c, t, 1, n);
        prop_assert!(stats.expert_counts.iter().all(|&k| k <= cap));
        prop_assert_eq!(stats.expert_counts.iter().sum::<usize>() + stats.dropped, t);
        prop_assert!(y.is_finite() && aux >= 0.0);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), placement in 0usize..3, n in 1usize..4) {
        let cfg = ViTConfig {
            image_size: 4, patch_size: 2, channels: 1, d_model: 4, n_heads: 2, depth: 4,
            mlp_ratio: 1, n_classes: 3, dropout: 0.0, stochastic_depth: 0.0,
        };
        let placement = [Placement::None, Placement::Every2, Placement::Last4][placement];
        let mut rng = Rng::seed_from_u64(seed);
        let mode = if seed % 2 == 0 { MoeMode::Rup } else { MoeMode::top1() };
        let model = build_ewa_model(&cfg, placement, n, &mode, &mut rng).unwrap();
        let ck = Checkpoint::from_model(&model);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_model().unwrap(), model);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_checkpoints_never_parse(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let cfg = ViTConfig {
            image_size: 4, patch_size: 2, channels: 1, d_model: 4, n_heads: 2, depth: 2,
            mlp_ratio: 1, n_classes: 2, dropout: 0.0, stochastic_depth: 0.0,
        };
        let mut rng = Rng::seed_from_u64(seed);
        let model = build_ewa_model(&cfg, Placement::Every2, 2, &MoeMode::Rup, &mut rng).unwrap();
        let bytes = Checkpoint::from_model(&model).to_bytes().unwrap();
        let len = (cut * bytes.len() as f64) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..len]).is_err());
    }

    #[test]
    fn synthetic_spec_round_trips(
        n in 1usize..5000, classes in 1usize..100, size in 1usize..64, noise in 0.0f64..5.0, seed in any::<u64>()
    ) {
        let spec = DatasetSpec::Synthetic(SyntheticSpec {
            n, classes, size, noise, seed, ..SyntheticSpec::default()
        });
        let text = spec.to_string();
        prop_assert_eq!(text.parse::<DatasetSpec>().unwrap(), spec);
    }
}
