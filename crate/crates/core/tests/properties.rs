use proptest::prelude::*;

use vfgen_core::metrics::{frechet_distance, knn_precision_recall, FeatureStats};
use vfgen_core::prompts::{assemble_sequence, LayoutMode, LossPolicy};
use vfgen_core::sampling::{cfg_combine, filtered_distribution, SamplerConfig};
use vfgen_core::theorylab::{path_prob_ar, path_prob_vf, prompt_factor, ChainSpec};

fn sampler() -> impl Strategy<Value = SamplerConfig> {
    (0usize..12, 0.05f64..=1.0, 0.2f64..3.0).prop_map(|(top_k, top_p, temperature)| SamplerConfig {
        top_k,
        top_p,
        temperature,
        ..Default::default()
    })
}

proptest! {
    #[test]
    fn filtered_distribution_is_a_distribution(
        logits in prop::collection::vec(-20.0f64..20.0, 1..64),
        cfg in sampler(),
    ) {
        let p = filtered_distribution(&logits, &cfg).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        let support = p.iter().filter(|x| **x > 0.0).count();
        prop_assert!(support >= 1);
        if cfg.top_k > 0 {
            prop_assert!(support <= cfg.top_k);
        }
        // Survivors are never less likely than a dropped code.
        let lo = logits.iter().zip(&p).filter(|(_, q)| **q > 0.0).map(|(l, _)| *l).fold(f64::INFINITY, f64::min);
        let hi = logits.iter().zip(&p).filter(|(_, q)| **q == 0.0).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo >= hi);
    }

    #[test]
    fn surviving_ratios_follow_the_tempered_softmax(
        logits in prop::collection::vec(-5.0f64..5.0, 2..32),
        cfg in sampler(),
    ) {
        let p = filtered_distribution(&logits, &cfg).unwrap();
        let kept: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
        for w in kept.windows(2) {
            let want = ((logits[w[0]] - logits[w[1]]) / cfg.temperature).exp();
            prop_assert!((p[w[0]] / p[w[1]] / want - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn guidance_is_affine_in_scale(
        pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..32),
        s in 0.0f64..4.0,
    ) {
        let (c, u): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let g = cfg_combine(&c, &u, s);
        for i in 0..c.len() {
            prop_assert!((g[i] - (u[i] + s * (c[i] - u[i]))).abs() < 1e-9);
        }
        prop_assert_eq!(cfg_combine(&c, &c, s), c.clone());
    }

    #[test]
    fn assembled_sequences_shift_by_one(
        prompt in prop::collection::vec(0u32..64, 0..20),
        image in prop::collection::vec(0u32..64, 1..20),
        after in any::<bool>(),
        image_only in any::<bool>(),
    ) {
        let mode = if after { LayoutMode::FullViewAfterGeneration } else { LayoutMode::PromptFirst };
        let policy = if image_only { LossPolicy::ImageOnly } else { LossPolicy::Full };
        let s = assemble_sequence(70, &prompt, &image, mode, policy).unwrap();
        let n = 1 + prompt.len() + image.len();
        prop_assert_eq!(s.input.len(), n - 1);
        prop_assert_eq!(s.target.len(), n - 1);
        prop_assert_eq!(&s.input[1..], &s.target[..n - 2]);
        prop_assert_eq!(s.input[0], 70);
        let img = s.layout.image_span();
        let got: Vec<u32> = img.clone().map(|i| s.target[i - 1]).collect();
        prop_assert_eq!(got, image.clone());
        let active = s.mask.count();
        if image_only {
            prop_assert_eq!(active, image.len());
        } else {
            prop_assert_eq!(active, n - 1);
        }
    }

    #[test]
    fn vf_path_is_ar_path_times_prompt_factor(
        steps in prop::collection::vec(0.0f64..=1.0, 2..12),
        prompt in prop::collection::vec(0.0f64..=1.0, 0..6),
    ) {
        let c = ChainSpec::new(steps, prompt).unwrap();
        let (ar, vf) = (path_prob_ar(&c).unwrap(), path_prob_vf(&c).unwrap());
        prop_assert!((vf - ar * prompt_factor(&c)).abs() <= 1e-12);
        prop_assert!(vf <= ar + 1e-15);
    }

    #[test]
    fn diagonal_frechet_matches_closed_form(
        a in prop::collection::vec((-3.0f64..3.0, 0.01f64..4.0), 1..8),
        b_shift in prop::collection::vec((-3.0f64..3.0, 0.01f64..4.0), 8),
    ) {
        let d = a.len();
        let diag = |v: &[(f64, f64)]| {
            let mut cov = vec![0.0; d * d];
            for i in 0..d {
                cov[i * d + i] = v[i].1;
            }
            FeatureStats { mean: v.iter().map(|x| x.0).collect(), cov, count: 100 }
        };
        let b = &b_shift[..d];
        let want: f64 = a.iter().zip(b).map(|(x, y)| {
            (x.0 - y.0).powi(2) + x.1 + y.1 - 2.0 * (x.1 * y.1).sqrt()
        }).sum();
        let got = frechet_distance(&diag(&a), &diag(b)).unwrap();
        prop_assert!((got - want).abs() < 1e-8 * (1.0 + want));
        let back = frechet_distance(&diag(b), &diag(&a)).unwrap();
        prop_assert!((got - back).abs() < 1e-8 * (1.0 + want));
    }

    #[test]
    fn precision_recall_are_fractions_and_full_on_identical_sets(
        pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 5..40),
    ) {
        let (p, r) = knn_precision_recall(&pts, &pts, 2).unwrap();
        prop_assert_eq!((p, r), (1.0, 1.0));
        let far: Vec<Vec<f64>> = pts.iter().map(|v| v.iter().map(|x| x + 100.0).collect()).collect();
        let (p, r) = knn_precision_recall(&pts, &far, 2).unwrap();
        prop_assert_eq!((p, r), (0.0, 0.0));
    }
}
