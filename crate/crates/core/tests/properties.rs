use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spineseg::data::PatientRecord;
use spineseg::diffusion::{sample_timestep, NoiseSchedule, ScheduleKind, TimestepSubsequence};
use spineseg::eval::{benjamini_hochberg, dice_score, make_folds, welch_t_test};
use spineseg::tensor::{argmax_channels, one_hot, softmax_channels, Tensor};

fn brute_force_bh(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let k_star = (1..=m)
        .filter(|&k| p.iter().filter(|&&q| q <= k as f64 * alpha / m as f64).count() >= k)
        .max()
        .unwrap_or(0);
    p.iter().map(|&q| k_star > 0 && q <= k_star as f64 * alpha / m as f64).collect()
}

fn finite_group() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..12)
}

fn spread(v: &[f64]) -> bool {
    v.iter().any(|x| (x - v[0]).abs() > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn bh_matches_threshold_enumeration(p in prop::collection::vec(prop_oneof![0.0f64..=1.0, 0.0f64..0.06], 0..=12), alpha in prop_oneof![Just(0.05), 0.001f64..0.5]) {
        prop_assert_eq!(benjamini_hochberg(&p, alpha).unwrap(), brute_force_bh(&p, alpha));
    }
}

proptest! {
    #[test]
    fn welch_is_shift_invariant_and_scale_covariant(a in finite_group(), b in finite_group(), shift in -100.0f64..100.0, scale in 0.1f64..10.0) {
        prop_assume!(spread(&a) || spread(&b));
        let (t, p) = welch_t_test(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let sa: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let sb: Vec<f64> = b.iter().map(|x| x + shift).collect();
        let (ts, ps) = welch_t_test(&sa, &sb).unwrap();
        prop_assert!((ts - t).abs() <= 1e-6 * t.abs().max(1.0));
        prop_assert!((ps - p).abs() <= 1e-6);
        let ka: Vec<f64> = a.iter().map(|x| x * scale).collect();
        let kb: Vec<f64> = b.iter().map(|x| x * scale).collect();
        let (tk, pk) = welch_t_test(&ka, &kb).unwrap();
        prop_assert!((tk - t).abs() <= 1e-8 * t.abs().max(1.0));
        prop_assert!((pk - p).abs() <= 1e-9);
        let na: Vec<f64> = a.iter().map(|x| -x).collect();
        let nb: Vec<f64> = b.iter().map(|x| -x).collect();
        let (tn, pn) = welch_t_test(&na, &nb).unwrap();
        prop_assert!((tn + t).abs() <= 1e-9 * t.abs().max(1.0));
        prop_assert!((pn - p).abs() <= 1e-12);
        let (tw, pw) = welch_t_test(&b, &a).unwrap();
        prop_assert_eq!(tw, -t);
        prop_assert_eq!(pw, p);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200), class in 0u8..4) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let ab = dice_score(&a, &b, class).unwrap();
        prop_assert_eq!(ab, dice_score(&b, &a, class).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_score(&a, &a, class).unwrap(), 1.0);
    }

    #[test]
    fn subsequences_decrease_to_zero(total in 1usize..2000, frac in 0.0f64..=1.0) {
        let count = ((total as f64 * frac).round() as usize).clamp(1, total);
        let s = TimestepSubsequence::new(total, count).unwrap();
        let steps = s.steps();
        prop_assert_eq!(steps.len(), count);
        prop_assert_eq!(steps[0], total - 1);
        prop_assert!(steps.windows(2).all(|w| w[0] > w[1]));
        if count > 1 {
            prop_assert_eq!(*steps.last().unwrap(), 0);
        }
        prop_assert_eq!(s.pairs().last().unwrap().1, -1);
    }

    #[test]
    fn schedules_are_monotone(steps in 1usize..1500, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = NoiseSchedule::new(kind, steps, 1e-4, 0.02).unwrap();
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b <= 0.999));
    }

    #[test]
    fn softmax_argmax_round_trips_labels(labels in prop::collection::vec(0u8..4, 36)) {
        let hot = one_hot(&labels, 4, 6, 6).unwrap();
        prop_assert_eq!(argmax_channels(&hot).unwrap(), labels.clone());
        let sharp = softmax_channels(&hot.scale(10.0)).unwrap();
        prop_assert_eq!(argmax_channels(&sharp).unwrap(), labels);
    }
}

#[test]
fn folds_partition_patients_for_every_seed() {
    for seed in 0..100u64 {
        let n = 6 + (seed as usize * 7) % 40;
        let records: Vec<PatientRecord> = (0..n)
            .map(|i| {
                let mut r = PatientRecord::new(format!("p{i:03}"));
                r.oblique = i % 9 == 4;
                r
            })
            .collect();
        let eligible: BTreeSet<String> = records.iter().filter(|r| !r.oblique).map(|r| r.patient_id.clone()).collect();
        let oblique: BTreeSet<String> = records.iter().filter(|r| r.oblique).map(|r| r.patient_id.clone()).collect();
        let split = make_folds(&records, 5, seed).unwrap();
        assert_eq!(split, make_folds(&records, 5, seed).unwrap());
        let mut seen = BTreeSet::new();
        for f in &split.folds {
            for p in f {
                assert!(seen.insert(p.clone()), "seed {seed}: {p} in two folds");
            }
        }
        assert_eq!(seen, eligible, "seed {seed}: folds do not cover the eligible patients");
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for k in 0..5 {
            let training: BTreeSet<String> = split.training(k).into_iter().collect();
            assert!(oblique.is_subset(&training));
            assert!(split.validation(k).iter().all(|p| !training.contains(p)));
        }
    }
}

#[test]
fn training_timesteps_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (bins, draws) = (1000usize, 100_000usize);
    let mut counts = vec![0usize; bins];
    for _ in 0..draws {
        counts[sample_timestep(&mut rng, bins)] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 999 degrees of freedom: mean 999, sd ≈ 44.7; 1150 is beyond the 0.999 quantile.
    assert!(chi2 < 1150.0, "chi-square {chi2:.1}");
    assert!(chi2 > 850.0, "suspiciously uniform: chi-square {chi2:.1}");
}

#[test]
fn randn_tensor_is_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let t = Tensor::randn(&[200_000], &mut rng);
    let m = t.mean();
    let var = t.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / t.len() as f64;
    assert!(m.abs() < 0.01 && (var - 1.0).abs() < 0.01);
}
