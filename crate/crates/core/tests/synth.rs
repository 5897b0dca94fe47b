use std::fs;
use std::path::Path;

use angiophase::bundle::{load_bundle, save_bundle, StudyBundle};
use angiophase::ecg::{annotate, heart_rate, EcgConfig};
use angiophase::labeling::{map_phase_to_frames, resample_to_10fps};
use angiophase::metrics::{edf_frames, EdfSource};
use angiophase::synth::{gen_dataset, gen_ecg, gen_sequence, SynthConfig, SynthDistribution};
use angiophase::vesselness::rasterize_mask;
use proptest::prelude::*;

fn small() -> SynthDistribution {
    SynthDistribution {
        size: 32,
        duration_s: (3.0, 4.0),
        contrast_fade_prob: 0.5,
        ..SynthDistribution::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let dirs = gen_dataset(10, &small(), 5, a.path()).unwrap();
    gen_dataset(10, &small(), 5, b.path()).unwrap();
    assert_eq!(dirs.len(), 10);
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn synthetic_bundles_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let dirs = gen_dataset(3, &small(), 9, &dir.path().join("a")).unwrap();
    for (k, d) in dirs.iter().enumerate() {
        let loaded = load_bundle(d).unwrap();
        let again = dir.path().join(format!("b{k}"));
        save_bundle(&loaded, &again).unwrap();
        assert_eq!(tree_bytes(d), tree_bytes(&again));
        assert_eq!(load_bundle(&again).unwrap(), loaded);
    }
}

#[test]
fn heart_rate_is_recovered_within_two_bpm() {
    let dist = SynthDistribution::default();
    for i in 0..40 {
        let cfg = dist.sample(17, i);
        let (trace, truth) = gen_ecg(&cfg).unwrap();
        let ann = annotate(&trace, &EcgConfig::default()).unwrap();
        let hr = heart_rate(&ann.peaks.r_peaks, trace.fs).unwrap();
        let expect = truth.heart_rate();
        assert!((40.0..=120.0).contains(&cfg.heart_rate_bpm));
        assert!((hr - expect).abs() <= 2.0, "sequence {i}: {hr} vs {expect}");
    }
}

#[test]
fn every_sampled_frame_rate_resamples_to_ten() {
    let dist = small();
    let mut seen = Vec::new();
    for i in 0..30 {
        let cfg = dist.sample(3, i);
        let seq = gen_sequence(&cfg).unwrap();
        let track = map_phase_to_frames(&seq.ecg_truth.phase(), seq.frames.len(), cfg.fps).unwrap();
        let frames = &seq.frames[track.interval.indices()];
        let r = resample_to_10fps(&track, frames).unwrap();
        let step = cfg.fps / 10.0;
        for (k, w) in r.source.windows(2).enumerate() {
            assert_eq!(w[1] - track.interval.start, ((k + 1) as f64 * step).round() as usize);
        }
        assert_eq!(r.frames.len(), r.labels.len());
        if !seen.contains(&(cfg.fps as u32)) {
            seen.push(cfg.fps as u32);
        }
    }
    seen.sort();
    assert_eq!(seen, vec![10, 15, 30]);
}

#[test]
fn truth_masks_follow_the_contrast_envelope() {
    let cfg = SynthConfig {
        fade_in: 8,
        fade_out: Some(50),
        ramp_frames: 2,
        ..SynthConfig::default()
    };
    let seq = gen_sequence(&cfg).unwrap();
    for (k, c) in seq.centerlines.iter().enumerate() {
        let mask = rasterize_mask(c, cfg.size, cfg.size);
        assert_eq!(mask.count() == 0, seq.truth.contrast[k] == 0.0, "frame {k}");
    }
    // Blank frames are background plus noise only.
    let bg = &seq.frames[0];
    for f in &seq.frames[1..8] {
        let diff = f.data.iter().zip(&bg.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 0.2);
    }
}

#[test]
fn bundle_keeps_truth_and_annotations() {
    let seq = gen_sequence(&SynthConfig::default()).unwrap();
    let b = StudyBundle::from_synth(&seq, "x").unwrap();
    assert_eq!(b.truth.as_ref().unwrap(), &seq.truth);
    let ann = b.annotations.as_ref().unwrap();
    assert!(!ann.is_empty());
    assert!(ann.iter().all(|a| a.frame % seq.config.annotate_every == 0));
    assert_eq!(b.frame_count(), seq.frames.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn truth_labels_reproduce_the_truth_edfs(seed in any::<u64>(), index in 0u64..1000) {
        let seq = gen_sequence(&small().sample(seed, index)).unwrap();
        prop_assert_eq!(&seq.truth.edf_frames, &edf_frames(&seq.truth.frame_labels, EdfSource::GroundTruth));
        for b in &seq.truth.beats {
            prop_assert!(b.r < b.t && b.t < b.eos && b.eos < b.next_r);
        }
    }

    #[test]
    fn generation_is_a_function_of_the_seed(seed in any::<u64>(), index in 0u64..1000) {
        let cfg = small().sample(seed, index);
        let (a, b) = (gen_sequence(&cfg).unwrap(), gen_sequence(&cfg).unwrap());
        prop_assert_eq!(a.frames, b.frames);
        prop_assert_eq!(a.ecg, b.ecg);
        prop_assert_eq!(a.truth, b.truth);
    }
}
