use angiophase::image::Image;
use angiophase::labeling::FrameInterval;
use angiophase::phasenet::{
    aggregate, coverage_count, phase_loss, phase_loss_grad, schmitt_filter, trace_from_features, upsample_probs,
    window_candidates, PhaseModel, PhaseNetArch, SchmittConfig,
};
use proptest::prelude::*;

fn enumerate_coverage(i: usize, m: usize) -> usize {
    (0..=m.saturating_sub(10)).filter(|&w| m >= 10 && w + 3 <= i && i <= w + 6).count()
}

#[test]
fn coverage_matches_enumeration() {
    for m in 10..=60 {
        for i in 0..m {
            assert_eq!(coverage_count(i, m), enumerate_coverage(i, m), "i={i} m={m}");
        }
    }
    let counts: Vec<usize> = (0..13).map(|i| coverage_count(i, 13)).collect();
    assert_eq!(counts, vec![0, 0, 0, 1, 2, 3, 4, 3, 2, 1, 0, 0, 0]);
    assert!((6..=23).all(|i| coverage_count(i, 30) == 4));
}

#[test]
fn aggregation_examples() {
    assert_eq!(aggregate(&[0.7, 0.9, 0.45, 0.8]), Some(0.9));
    assert_eq!(aggregate(&[0.1, 0.9]), Some(0.1));
    assert_eq!(aggregate(&[0.8]), None);
}

#[test]
fn schmitt_examples() {
    assert_eq!(schmitt_filter(&[0.1, 0.45, 0.7, 0.55, 0.3], 0.6, 0.4).unwrap(), vec![0, 0, 1, 1, 0]);
    assert_eq!(schmitt_filter(&[0.5, 0.45, 0.55], 0.6, 0.4).unwrap(), vec![1, 1, 1]);
    assert_eq!(schmitt_filter(&[0.1], 0.4, 0.4).unwrap_err().category(), "ConfigError");
    let p = [0.2, 0.5, 0.5000005, 0.51, 0.49, 0.3];
    let eps = 1e-6;
    let out = schmitt_filter(&p, 0.5 + eps, 0.5).unwrap();
    assert_eq!(out, vec![0, 0, 0, 1, 0, 0]);
}

#[test]
fn upsampling_examples() {
    let out = upsample_probs(&[(0, 0.0), (3, 1.0)], FrameInterval::new(0, 3)).unwrap();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 1.0 / 3.0).abs() < 1e-15 && (out[2] - 2.0 / 3.0).abs() < 1e-15);
    let knots: Vec<(usize, f64)> = (0..5).map(|i| (i, i as f64 / 4.0)).collect();
    assert_eq!(upsample_probs(&knots, FrameInterval::new(0, 4)).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(upsample_probs(&[(0, 0.3)], FrameInterval::new(0, 3)).unwrap_err().category(), "SequenceTooShort");
}

#[test]
fn loss_rewards_correct_side_of_the_threshold() {
    assert!(phase_loss(0.7, 1.0).unwrap() < phase_loss(0.3, 1.0).unwrap());
    assert!(phase_loss(1.0 - 1e-12, 1.0).unwrap() < 1e-10);
    assert_eq!(phase_loss(1.0, 1.0).unwrap_err().category(), "DomainError");
    assert_eq!(phase_loss(0.0, 0.0).unwrap_err().category(), "DomainError");
}

fn brute_upsample(knots: &[(usize, f64)], f: usize) -> f64 {
    if f <= knots[0].0 {
        return knots[0].1;
    }
    let last = knots[knots.len() - 1];
    if f >= last.0 {
        return last.1;
    }
    for w in knots.windows(2) {
        let ((a, pa), (b, pb)) = (w[0], w[1]);
        if a <= f && f <= b {
            return pa + (pb - pa) * (f - a) as f64 / (b - a) as f64;
        }
    }
    unreachable!()
}

fn knots_strategy() -> impl Strategy<Value = Vec<(usize, f64)>> {
    prop::collection::vec((1usize..5, 0.0f64..=1.0), 2..20).prop_map(|steps| {
        let mut at = 2;
        steps
            .into_iter()
            .map(|(d, p)| {
                at += d;
                (at, p)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn aggregate_picks_a_candidate_farthest_from_half(c in prop::collection::vec(0.0f64..=1.0, 2..8)) {
        let p = aggregate(&c).unwrap();
        let first = c.iter().position(|&x| x == p).unwrap();
        let best = c.iter().map(|x| (x - 0.5).abs()).fold(0.0, f64::max);
        prop_assert_eq!((p - 0.5).abs(), best);
        prop_assert!(c[..first].iter().all(|x| (x - 0.5).abs() < best));
    }

    #[test]
    fn upsampling_matches_piecewise_linear(knots in knots_strategy(), pad in 0usize..4) {
        let iv = FrameInterval::new(knots[0].0 - pad.min(knots[0].0), knots[knots.len() - 1].0 + pad);
        let out = upsample_probs(&knots, iv).unwrap();
        for (j, f) in iv.indices().enumerate() {
            prop_assert!((out[j] - brute_upsample(&knots, f)).abs() < 1e-12);
        }
    }

    #[test]
    fn schmitt_switches_only_on_crossings(
        p in prop::collection::vec(0.0f64..=1.0, 1..60),
        lo in 0.0f64..0.5,
        gap in 0.01f64..0.5,
    ) {
        let hi = (lo + gap).min(1.0);
        let out = schmitt_filter(&p, hi, lo).unwrap();
        for i in 0..p.len() {
            let prev = if i == 0 { u8::from(p[0] >= 0.5) } else { out[i - 1] };
            if out[i] != prev {
                let crossed = if out[i] == 1 { p[i] >= hi } else { p[i] <= lo };
                prop_assert!(crossed);
            }
            if p[i] >= hi { prop_assert_eq!(out[i], 1); }
            if p[i] <= lo { prop_assert_eq!(out[i], 0); }
        }
    }

    #[test]
    fn hold_region_never_switches(u in prop::collection::vec(0.001f64..0.999, 1..40)) {
        let (lo, hi) = (0.3, 0.7);
        let p: Vec<f64> = u.iter().map(|x| lo + (hi - lo) * x).collect();
        let out = schmitt_filter(&p, hi, lo).unwrap();
        prop_assert!(out.iter().all(|&o| o == out[0]));
    }

    #[test]
    fn loss_gradient_matches_finite_differences(p in 0.01f64..0.99, y in 0.0f64..=1.0) {
        let h = 1e-6;
        // Stay off the round(p) discontinuity at 0.5.
        prop_assume!((p - 0.5).abs() > 2.0 * h);
        let fd = (phase_loss(p + h, y).unwrap() - phase_loss(p - h, y).unwrap()) / (2.0 * h);
        let g = phase_loss_grad(p, y).unwrap();
        prop_assert!((fd - g).abs() <= 1e-3 * g.abs().max(1.0));
    }

    #[test]
    fn candidates_follow_the_coverage_formula(m in 10usize..40) {
        let windows = vec![[0.5; 4]; m - 9];
        let c = window_candidates(&windows, m);
        for (i, ci) in c.iter().enumerate() {
            prop_assert_eq!(ci.len(), coverage_count(i, m));
        }
    }
}

fn frames(m: usize, seed: u64) -> Vec<Image> {
    (0..m)
        .map(|k| {
            let data = (0..16 * 16)
                .map(|i| (((i as u64 * 31 + k as u64 * 7 + seed) % 97) as f64) / 97.0)
                .collect();
            Image::new(16, 16, data).unwrap()
        })
        .collect()
}

#[test]
fn trace_is_deterministic_and_confined_to_the_interval() {
    let arch = PhaseNetArch {
        resolution: 16,
        hidden: 8,
        dropout: 0.5,
    };
    let model = PhaseModel::init(arch, 3).unwrap();
    let f = frames(20, 1);
    // 15 fps source: 20 kept frames out of an interval of 30.
    let interval = FrameInterval::new(5, 34);
    let source: Vec<usize> = angiophase::labeling::resample_indices(30, 15.0)
        .unwrap()
        .iter()
        .map(|i| i + 5)
        .collect();
    assert_eq!(source.len(), 20);
    let feats = model.spatial_features(&f).unwrap();
    let a = trace_from_features(&model, &feats, &source, interval, 15.0, SchmittConfig::default(), "x").unwrap();
    let feats2 = model.spatial_features(&f).unwrap();
    let b = trace_from_features(&model, &feats2, &source, interval, 15.0, SchmittConfig::default(), "x").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.frames.len(), interval.len());
    assert!(a.frames.iter().all(|p| interval.contains(p.frame) && p.label <= 1));
    for r in &a.resampled {
        assert_eq!(r.selected.is_some(), r.candidates.len() >= 2);
        if let Some(s) = r.selected {
            assert!(r.candidates.contains(&s));
        }
    }
    let w = model.predict_window(&feats.slice_outer(0, 10).unwrap()).unwrap();
    assert!(w.iter().all(|&p| p > 0.0 && p < 1.0));
}
