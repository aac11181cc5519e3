use proptest::collection::vec;
use proptest::prelude::*;

use wmlab::attacks::MixSpec;
use wmlab::base::softmax;
use wmlab::config::ExperimentConfig;
use wmlab::detect::{kgw_z_from_counts, normal_log10_sf};
use wmlab::hashing::{green_count, green_partition, window_hash, HashKind, WatermarkKey};
use wmlab::lm::{fit, Corpus, Provenance, Smoothing};
use wmlab::pipeline::spearman;
use wmlab::schemes::{kgw_process, synthid_layer_exact, WatermarkSpec};
use wmlab::steal::{d_score, weight};
use wmlab::{Dist, LogitVec, TokenSeq, Vocab};

fn weights(len: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(0.0f64..10.0, len).prop_filter("some mass", |w| w.iter().sum::<f64>() > 1e-6)
}

proptest! {
    #[test]
    fn dist_from_weights_sums_to_one(w in weights(17)) {
        let d = Dist::from_weights(w).unwrap();
        prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_update_normalized_and_monotone(w in weights(16), bits in vec(any::<bool>(), 16)) {
        let d = Dist::from_weights(w).unwrap();
        let out = synthid_layer_exact(&d, &bits).unwrap();
        prop_assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mass = |x: &Dist| x.probs().iter().zip(&bits).filter(|(_, &b)| b).map(|(p, _)| p).sum::<f64>();
        prop_assert!(mass(&out) >= mass(&d) - 1e-12);
    }

    #[test]
    fn partition_count_is_exact(h in any::<u64>(), key in any::<u64>(), gamma in 0.01f64..1.0, size in 2usize..600) {
        let vocab = Vocab::new(size).unwrap();
        let p = green_partition(h, WatermarkKey(key), gamma, vocab).unwrap();
        prop_assert_eq!(p.count(), green_count(gamma, vocab));
        prop_assert_eq!(p.count(), (gamma * size as f64).floor() as usize);
        prop_assert_eq!(p.green_tokens().count(), p.count());
    }

    #[test]
    fn window_hash_in_range(window in vec(0u32..300, 1..5), size in 300usize..1000) {
        let vocab = Vocab::new(size).unwrap();
        let h = window_hash(&window, HashKind::Multiplicative, vocab).unwrap();
        prop_assert!(h < size as u64);
        prop_assert_eq!(h, window_hash(&window, HashKind::Multiplicative, vocab).unwrap());
    }

    #[test]
    fn kgw_keeps_same_color_gaps(logits in vec(-5.0f64..5.0, 32), prev in 0u32..32, key in any::<u64>(), delta in 0.1f64..6.0) {
        let vocab = Vocab::new(32).unwrap();
        let spec = WatermarkSpec::kgw(2, key, delta, 0.5);
        let l = LogitVec::new(logits.clone()).unwrap();
        let out = kgw_process(&l, &[prev], &spec, vocab).unwrap();
        let h = spec.rule_hash(&[prev], vocab).unwrap();
        let part = green_partition(h, spec.key, spec.gamma, vocab).unwrap();
        for i in 0..32u32 {
            for j in 0..32u32 {
                if part.is_green(i) == part.is_green(j) {
                    let (a, b) = (out.logits()[i as usize] - out.logits()[j as usize], logits[i as usize] - logits[j as usize]);
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
        let green_mass = |d: &Dist| (0..32u32).filter(|&t| part.is_green(t)).map(|t| d.probs()[t as usize]).sum::<f64>();
        let before = softmax(&l, 1.0).unwrap();
        let after = softmax(&out, 1.0).unwrap();
        prop_assert!(green_mass(&after) > green_mass(&before));
    }

    #[test]
    fn z_increases_with_greens(t in 2u64..5000, gamma in 0.05f64..0.95, frac in 0.0f64..1.0) {
        let g = ((t - 1) as f64 * frac) as u64;
        prop_assert!(kgw_z_from_counts(g + 1, t, gamma).unwrap() > kgw_z_from_counts(g, t, gamma).unwrap());
    }

    #[test]
    fn tail_is_decreasing(z in -30.0f64..400.0, dz in 0.001f64..5.0) {
        let (a, b) = (normal_log10_sf(z), normal_log10_sf(z + dz));
        prop_assert!(a.is_finite() && b.is_finite());
        prop_assert!(b < a && a <= 0.0);
    }

    #[test]
    fn d_score_bounded(pw in 1e-9f64..1.0, po in 1e-9f64..1.0) {
        let d = d_score(pw, po);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d == 0.0, pw <= po);
    }

    #[test]
    fn weight_monotone_in_frequency(a in 1e-4f64..0.5, b in 1e-4f64..0.5, alpha in 0.0f64..2.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let wl = weight(lo, 0.5, alpha, 5e-5).unwrap();
        let wh = weight(hi, 0.5, alpha, 5e-5).unwrap();
        prop_assert!(wl <= wh + 1e-12);
        prop_assert!(wl > 0.0 && wh <= 1.0 + 1e-12);
    }

    #[test]
    fn mix_counts_sum_to_total(raw in vec(1u32..100, 2..9), total in 0usize..100_000) {
        let sum: u32 = raw.iter().sum();
        let spec = MixSpec { shares: raw.iter().map(|&r| r as f64 / sum as f64).collect() };
        spec.validate().unwrap();
        let counts = spec.counts(total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, s) in counts.iter().zip(&spec.shares) {
            prop_assert!((*c as f64 - s * total as f64).abs() < 1.0);
        }
    }

    #[test]
    fn spearman_in_range(x in vec(-10.0f64..10.0, 3..30), seed in any::<u64>()) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| ((seed.rotate_left(i as u32) % 1000) as f64) + v).collect();
        let (rho, p) = spearman(&x, &y);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn fit_ignores_sequence_order(seqs in vec(vec(0u32..6, 3..12), 1..20), rot in 0usize..20) {
        let vocab = Vocab::new(6).unwrap();
        let seqs: Vec<TokenSeq> = seqs.into_iter().map(|t| TokenSeq::new(t, 1).unwrap()).collect();
        let mut shuffled = seqs.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        let a = fit(&Corpus::new(seqs, Provenance::Generated), vocab, 3, 0.1, Smoothing::Backoff).unwrap();
        let b = fit(&Corpus::new(shuffled, Provenance::Generated), vocab, 3, 0.1, Smoothing::Backoff).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn corpus_text_round_trip(seqs in vec((vec(0u32..1000, 1..10), 0usize..10), 1..10)) {
        let seqs: Vec<TokenSeq> = seqs.into_iter().map(|(t, p)| { let p = p.min(t.len() - 1); TokenSeq::new(t, p).unwrap() }).collect();
        let c = Corpus::new(seqs, Provenance::TeacherClean);
        let back = Corpus::parse_text(&c.to_string(), Provenance::TeacherClean).unwrap();
        prop_assert_eq!(back.sequences, c.sequences);
    }

    #[test]
    fn config_text_round_trip(delta in 0.0f64..20.0, gamma in 0.05f64..0.95, n in 1usize..5, seed in any::<u64>(), sizes in vec(1usize..50_000, 1..4)) {
        let c = ExperimentConfig {
            wm_delta: delta,
            wm_gamma: gamma,
            wm_n: n,
            seed,
            detect_group_sizes: sizes,
            ..Default::default()
        };
        let mut back = ExperimentConfig::default();
        for line in c.to_text().lines().filter(|l| !l.starts_with('#')) {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k.trim(), v.trim()).unwrap();
        }
        prop_assert_eq!(back, c);
    }
}
