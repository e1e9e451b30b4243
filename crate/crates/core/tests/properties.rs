use mote::backbone::{BankRole, EmbeddingBank};
use mote::harness::{harmonic_mean, predict, RunConfig};
use mote::objectives::{kl_to_target, loss_mse};
use mote::stack::{merge_coefficients, routing_probabilities, MergeSchedule, Tau, TauSampling};
use mote::synthdata::{kshot_sample, mixed_bank, Episode};
use mote::tensor::{Tape, Tensor};
use mote::tfm::{modulated_embedding, rho_from_association};
use proptest::prelude::*;
use rand::SeedableRng;

fn nonzero_tau() -> impl Strategy<Value = f64> {
    prop_oneof![-50.0..-1e-3, 1e-3..50.0f64]
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

proptest! {
    #[test]
    fn merge_coefficients_form_a_convex_combination(n in 1usize..12, tau in nonzero_tau()) {
        let c = merge_coefficients(n, Tau::Finite(tau)).unwrap();
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(c.iter().all(|&x| x > 0.0 || (x >= 0.0 && tau.abs() < 0.1)));
    }

    #[test]
    fn negating_tau_reverses_coefficients_exactly(n in 1usize..12, tau in nonzero_tau()) {
        let pos = merge_coefficients(n, Tau::Finite(tau)).unwrap();
        let mut neg = merge_coefficients(n, Tau::Finite(-tau)).unwrap();
        neg.reverse();
        prop_assert_eq!(pos, neg);
    }

    #[test]
    fn positive_tau_favours_later_experts(n in 2usize..12, tau in 1e-2..50.0f64) {
        let c = merge_coefficients(n, Tau::Finite(tau)).unwrap();
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sampled_taus_are_usable(seed in any::<u64>(), beta in 0.01..5.0f64, which in 0usize..4, layers in 1usize..6) {
        let sampling = [TauSampling::Discrete, TauSampling::ContinuousNormal, TauSampling::ContinuousUniform, TauSampling::Point][which];
        let s = MergeSchedule { beta, sampling, per_layer: true };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for tau in s.sample_layers(layers, &mut rng) {
            prop_assert!(merge_coefficients(4, tau).is_ok());
        }
    }

    #[test]
    fn routing_law_is_a_distribution(n in 1usize..20) {
        let p = routing_probabilities(n);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rho_is_monotone_in_association(a in 0.0..1.0f64, b in 0.0..1.0f64, gamma in 1e-3..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (r_lo, r_hi) = (rho_from_association(lo, gamma), rho_from_association(hi, gamma));
        prop_assert!(r_lo <= r_hi);
        prop_assert!(r_hi <= 1.0 && r_lo >= 0.0);
        prop_assert_eq!(rho_from_association(1.0, gamma), 1.0);
    }

    #[test]
    fn modulation_interpolates(e in prop::collection::vec(-1.0..1.0f64, 4), t in prop::collection::vec(-1.0..1.0f64, 4)) {
        prop_assert_eq!(modulated_embedding(&e, &t, 0.0).unwrap(), e.clone());
        let full = modulated_embedding(&e, &t, 1.0).unwrap();
        for i in 0..4 {
            prop_assert_eq!(full[i], e[i] + t[i]);
        }
    }

    #[test]
    fn harmonic_mean_lies_between_min_and_arithmetic_mean(v in prop::collection::vec(0.1..100.0f64, 1..8)) {
        let h = harmonic_mean(&v).unwrap();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(h >= min * (1.0 - 1e-12) && h <= mean * (1.0 + 1e-12));
    }

    #[test]
    fn harmonic_mean_of_equal_values(x in 0.1..100.0f64, n in 1usize..6) {
        let h = harmonic_mean(&vec![x; n]).unwrap();
        prop_assert!((h - x).abs() <= 1e-12 * x);
    }

    #[test]
    fn argmax_survives_positive_power_of_two_scaling(l in prop::collection::vec(-5.0..5.0f64, 1..10), k in -8i32..8) {
        let scaled: Vec<f64> = l.iter().map(|x| x * 2f64.powi(k)).collect();
        prop_assert_eq!(predict(&l), predict(&scaled));
    }

    #[test]
    fn kl_and_mse_are_non_negative(seed in any::<u64>(), b in 1usize..4, c in 2usize..6) {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rnd = |n: usize| (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<f64>>();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![b, c], rnd(b * c)).unwrap());
        let y = tape.constant(Tensor::new(vec![b, c], rnd(b * c)).unwrap());
        let kl = tape.value(kl_to_target(&tape, x, y).unwrap()).item();
        prop_assert!(kl >= -1e-12, "kl {}", kl);
        let same = tape.value(kl_to_target(&tape, x, x).unwrap()).item();
        prop_assert!(same.abs() <= 1e-12);
        let mse = tape.value(loss_mse(&tape, x, y).unwrap()).item();
        prop_assert!(mse >= 0.0);
        let ce = tape.value(tape.cross_entropy(x, &vec![0; b]).unwrap()).item();
        prop_assert!(ce >= 0.0);
    }

    #[test]
    fn mixed_bank_is_the_label_union(ft in 1usize..8, test in 1usize..8, shared in 0usize..4, seed in any::<u64>()) {
        let shared = shared.min(ft).min(test);
        let a = EmbeddingBank::gaussian(labels("c", ft), 6, seed, BankRole::FineTuning).unwrap();
        let mut test_labels = labels("c", shared);
        test_labels.extend(labels("u", test - shared));
        let b = EmbeddingBank::gaussian(test_labels, 6, seed ^ 1, BankRole::Test).unwrap();
        let m = mixed_bank(&a, &b).unwrap();
        prop_assert_eq!(m.len(), ft + test - shared);
        for l in a.labels().iter().chain(b.labels()) {
            prop_assert!(m.index_of(l).is_some());
        }
    }

    #[test]
    fn kshot_keeps_size_and_draws_k_per_class(k in 1usize..5, classes in 1usize..5, per in 5usize..8, seed in any::<u64>()) {
        let eps: Vec<Episode> = (0..classes * per)
            .map(|i| Episode { frames: vec![vec![i as f64]; 2], label: format!("c{}", i % classes) })
            .collect();
        let out = kshot_sample(&eps, k, seed).unwrap();
        prop_assert_eq!(out.len(), eps.len());
        for c in 0..classes {
            let label = format!("c{c}");
            let mut ids: Vec<u64> = out.iter().filter(|e| e.label == label).map(|e| e.frames[0][0].to_bits()).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), k);
        }
        prop_assert_eq!(out, kshot_sample(&eps, k, seed).unwrap());
    }

    #[test]
    fn tensor_json_never_panics(shape in prop::collection::vec(0usize..5, 0..4), n in 0usize..40) {
        let json = serde_json::json!({ "shape": shape, "data": vec![0.5; n] }).to_string();
        let expected: usize = shape.iter().product();
        match serde_json::from_str::<Tensor>(&json) {
            Ok(t) => prop_assert_eq!(t.numel(), expected),
            Err(_) => prop_assert_ne!(n, expected),
        }
    }

    #[test]
    fn episode_lines_parse_iff_rectangular(rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 1..4), 1..4)) {
        let line = serde_json::json!({ "frames": rows, "label": "x" }).to_string();
        let rectangular = rows.iter().all(|r| r.len() == rows[0].len());
        prop_assert_eq!(Episode::from_json_line(&line).is_ok(), rectangular);
    }

    #[test]
    fn config_toml_round_trips(experts in 1usize..8, layers in 1usize..4, lambda in 0.0..2.0f64, seed in any::<u64>()) {
        let mut c = RunConfig::default();
        c.model.experts = experts;
        c.model.layers = layers;
        c.loss.lambda = lambda;
        c.seeds.init = seed >> 1;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }
}
