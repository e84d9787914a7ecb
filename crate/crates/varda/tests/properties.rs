//! Randomized invariants: algebraic identities of the Gaussian machinery,
//! metric symmetries, and config round trips, each over generated inputs.

use proptest::prelude::*;

use varda::data::{apply_spec, SynthSpec};
use varda::gaussian::{
    kl_to_standard_normal, mixture_l2_distance, pair_kernel, sliced_l2_distance, DiagGaussianBatch,
};
use varda::metrics::{assd, dice};
use varda::nets::NetConfig;
use varda::oracle::{brute_assd, brute_dice};
use varda::tensor::{Tape, Tensor};
use varda::train::{apply_config, TrainConfig};
use varda::{config, Real};

fn batch(means: Vec<Real>, log_vars: Vec<Real>, m: usize, n: usize) -> DiagGaussianBatch {
    DiagGaussianBatch::new(
        Tensor::from_vec(&[m, n], means).unwrap(),
        Tensor::from_vec(&[m, n], log_vars).unwrap(),
    )
    .unwrap()
}

/// A random mixture as (means, log variances, components, dimension).
fn mixture(max_m: usize, max_n: usize) -> impl Strategy<Value = (Vec<Real>, Vec<Real>, usize, usize)> {
    (1..=max_m, 1..=max_n).prop_flat_map(|(m, n)| {
        (
            prop::collection::vec(-3.0..3.0f64, m * n),
            prop::collection::vec(-2.0..1.5f64, m * n),
            Just(m),
            Just(n),
        )
    })
}

fn rel_close(a: Real, b: Real, tol: Real) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// Both distances are symmetric in their arguments and never negative.
    #[test]
    fn distance_symmetric_nonnegative(
        s in mixture(4, 6),
        t in mixture(4, 6),
    ) {
        prop_assume!(s.3 == t.3);
        let (sm, sv, s_m, n) = s;
        let (tm, tv, t_m, _) = t;
        let a = batch(sm, sv, s_m, n);
        let b = batch(tm, tv, t_m, n);
        let tape = Tape::no_grad();
        for f in [mixture_l2_distance, sliced_l2_distance] {
            let ab = f(&tape, &a, &b).unwrap().item();
            let ba = f(&tape, &b, &a).unwrap().item();
            prop_assert!(rel_close(ab, ba, 1e-12), "asymmetric: {ab} vs {ba}");
            prop_assert!(ab >= -1e-12, "negative distance {ab}");
        }
    }

    /// The Gaussian inner product is symmetric and strictly positive.
    #[test]
    fn kernel_symmetric_positive(
        a in mixture(1, 8),
        b in mixture(1, 8),
    ) {
        prop_assume!(a.3 == b.3);
        let (am, av, _, n) = a;
        let (bm, bv, _, _) = b;
        let ga = batch(am, av, 1, n);
        let gb = batch(bm, bv, 1, n);
        let tape = Tape::no_grad();
        let ab = pair_kernel(&tape, &ga, &gb).unwrap().item();
        let ba = pair_kernel(&tape, &gb, &ga).unwrap().item();
        prop_assert!(ab > 0.0);
        prop_assert!(rel_close(ab, ba, 1e-12), "asymmetric kernel: {ab} vs {ba}");
    }

    /// In one dimension the per-coordinate distance IS the full distance.
    #[test]
    fn sliced_equals_full_at_one_dimension(
        s in mixture(4, 1),
        t in mixture(4, 1),
    ) {
        let (sm, sv, s_m, _) = s;
        let (tm, tv, t_m, _) = t;
        let a = batch(sm, sv, s_m, 1);
        let b = batch(tm, tv, t_m, 1);
        let tape = Tape::no_grad();
        let full = mixture_l2_distance(&tape, &a, &b).unwrap().item();
        let sliced = sliced_l2_distance(&tape, &a, &b).unwrap().item();
        prop_assert!(rel_close(full, sliced, 1e-10), "full {full} vs sliced {sliced}");
    }

    /// KL to the prior is nonnegative and exactly zero on the prior itself.
    #[test]
    fn kl_nonnegative(g in mixture(3, 8)) {
        let (m_, v_, m, n) = g;
        let tape = Tape::no_grad();
        let kl = kl_to_standard_normal(&tape, &batch(m_, v_, m, n)).unwrap();
        for &v in kl.data().iter() {
            prop_assert!(v >= 0.0, "negative KL {v}");
        }
        let std = batch(vec![0.0; n], vec![0.0; n], 1, n);
        let zero = kl_to_standard_normal(&tape, &std).unwrap().item();
        prop_assert_eq!(zero, 0.0);
    }

    /// Dice and surface distance are symmetric and agree with brute force on
    /// arbitrary masks, including empty ones.
    #[test]
    fn metrics_symmetric_and_match_oracle(
        pred in prop::collection::vec(0u8..3, 64),
        truth in prop::collection::vec(0u8..3, 64),
        class in 0u8..3,
    ) {
        let (h, w) = (8, 8);
        let d_pt = dice(&pred, &truth, class);
        let d_tp = dice(&truth, &pred, class);
        prop_assert_eq!(d_pt.value.to_bits(), d_tp.value.to_bits());
        if !d_pt.vacuous {
            prop_assert!((0.0..=1.0).contains(&d_pt.value));
        }
        let pb: Vec<bool> = pred.iter().map(|&v| v == class).collect();
        let tb: Vec<bool> = truth.iter().map(|&v| v == class).collect();
        prop_assert_eq!(d_pt.value.to_bits(), brute_dice(&pb, &tb).to_bits());

        let a_pt = assd(&pred, &truth, class, h, w);
        let a_tp = assd(&truth, &pred, class, h, w);
        prop_assert_eq!(a_pt, a_tp);
        prop_assert_eq!(a_pt, brute_assd(&pb, &tb, h, w));
        let either_empty = !pb.iter().any(|&x| x) || !tb.iter().any(|&x| x);
        prop_assert_eq!(a_pt.is_none(), either_empty);
    }

    /// A training config written as a manifest parses back to itself.
    #[test]
    fn train_config_round_trips(
        batch in 1usize..64,
        iterations in 1usize..10_000,
        samples in 1usize..4,
        lr in 1e-6..1.0f64,
        lr_decay in 0.1..1.0f64,
        lr_interval in 1usize..1000,
        alpha1 in 0.0..4.0f64,
        alpha3 in 0.0..1.0f64,
        entropy in 0.0..2.0f64,
        seed in any::<u64>(),
        clip in prop::option::of(0.5..100.0f64),
        early in prop::option::of((1usize..500, 1e-6..1e-2f64)),
        full_mode in any::<bool>(),
        latent_dim in 1usize..256,
        decoder_convs in 0usize..12,
        weak in any::<bool>(),
    ) {
        use varda::loss::{DiscrepancyMode, LossWeights};
        use varda::train::EarlyStop;

        let reference = TrainConfig {
            batch,
            iterations,
            samples_per_image: samples,
            lr,
            lr_decay,
            lr_interval,
            weights: LossWeights { alpha1, alpha2: 1.0, alpha3, entropy },
            mode: if full_mode { DiscrepancyMode::Full } else { DiscrepancyMode::Sliced },
            seed,
            clip_norm: clip,
            early_stop: early.map(|(window, rel_tol)| EarlyStop { window, rel_tol }),
            ..TrainConfig::default()
        };
        let net = NetConfig {
            latent_dim,
            decoder_convs,
            label_conditioned: !weak,
            ..NetConfig::default()
        };

        let text = reference.resolved_text(&net);
        let entries = config::parse_kv(&text).unwrap();
        let mut got_train = TrainConfig::default();
        let mut got_net = NetConfig::default();
        apply_config(&entries, &mut got_train, &mut got_net).unwrap();
        prop_assert_eq!(got_train.resolved_text(&got_net), text);
    }

    /// A dataset spec written as a manifest parses back to itself.
    #[test]
    fn synth_spec_round_trips(
        hw in (6usize..12).prop_map(|q| q * 4),
        n_source in 1usize..200,
        n_test in 1usize..50,
        seed in any::<u64>(),
        contrast in 0.2..1.5f64,
        noise in 0.0..0.2f64,
        gamma in 0.5..2.5f64,
    ) {
        let reference = SynthSpec {
            image_hw: hw,
            n_source,
            n_target_test: n_test,
            seed,
            ..SynthSpec::default()
        };
        let mut reference = reference;
        reference.target.contrast = contrast;
        reference.target.noise_sd = noise;
        reference.target.gamma = gamma;

        let text = reference.resolved_text();
        let entries = config::parse_kv(&text).unwrap();
        let mut got = SynthSpec::default();
        apply_spec(&entries, &mut got).unwrap();
        prop_assert_eq!(got.resolved_text(), text);
    }
}
