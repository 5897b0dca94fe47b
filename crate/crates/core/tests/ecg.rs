use angiophase::ecg::{
    annotate, bandpass_zero_phase, build_phase_signal, detect_r_peaks, lowpass_zero_phase, t_window, EcgConfig,
    EcgTrace,
};
use angiophase::synth::{gen_ecg, SynthConfig};
use proptest::prelude::*;

fn clean(hr: f64, duration_s: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        heart_rate_bpm: hr,
        rr_jitter: 0.0,
        duration_s,
        ecg_snr_db: None,
        baseline_wander_mv: 0.0,
        seed,
        ..SynthConfig::default()
    }
}

fn nearest(target: usize, found: &[usize]) -> usize {
    found.iter().map(|&f| f.abs_diff(target)).min().unwrap_or(usize::MAX)
}

#[test]
fn clean_r_peaks_land_within_one_sample() {
    for seed in 0..5 {
        let cfg = clean(60.0, 10.0, seed);
        let (trace, truth) = gen_ecg(&cfg).unwrap();
        let found = annotate(&trace, &EcgConfig::default()).unwrap().peaks.r_peaks;
        for r in truth.r_peaks() {
            if r >= 30 && r + 30 < trace.len() {
                assert!(nearest(r, &found) <= 1, "seed {seed}: truth {r}, found {found:?}");
            }
        }
    }
}

#[test]
fn hundred_bpm_for_ten_seconds() {
    let cfg = SynthConfig {
        heart_rate_bpm: 100.0,
        duration_s: 10.0,
        rr_jitter: 0.0,
        ..SynthConfig::default()
    };
    let (trace, _) = gen_ecg(&cfg).unwrap();
    let filtered = bandpass_zero_phase(&trace, 3.0, 45.0).unwrap();
    let n = detect_r_peaks(&filtered).unwrap().len();
    assert!((16..=17).contains(&n), "{n} peaks");
}

#[test]
fn t_peak_lands_near_the_bump_centre() {
    for (seed, inverted) in [(1, false), (2, true)] {
        let cfg = SynthConfig {
            t_inverted: inverted,
            ..clean(70.0, 8.0, seed)
        };
        let (trace, truth) = gen_ecg(&cfg).unwrap();
        let ann = annotate(&trace, &EcgConfig::default()).unwrap();
        let tol = (0.010 * trace.fs).round() as usize;
        for b in &ann.peaks.beats {
            let tb = truth.beats.iter().find(|t| t.r.abs_diff(b.r as i64) <= 2).unwrap();
            let t = b.t_peak.expect("clean beat has a T peak");
            assert!(t.abs_diff(tb.t as usize) <= tol, "T at {t}, bump at {}", tb.t);
        }
    }
}

#[test]
fn ten_beat_phase_agrees_with_the_generator() {
    for (seed, inverted) in [(3, false), (4, false), (5, true)] {
        let cfg = SynthConfig {
            heart_rate_bpm: 75.0,
            duration_s: 8.0,
            t_inverted: inverted,
            seed,
            ..SynthConfig::default()
        };
        let (trace, truth) = gen_ecg(&cfg).unwrap();
        let ann = annotate(&trace, &EcgConfig::default()).unwrap();
        assert!(ann.peaks.beats.len() >= 9);
        let phase = build_phase_signal(&ann.peaks, trace.len(), trace.fs).unwrap();
        let reference = truth.phase();
        let range = phase.valid_start.max(reference.valid_start)..phase.valid_end.min(reference.valid_end);
        let agree = range.clone().filter(|&i| phase.values[i] == reference.values[i]).count();
        let frac = agree as f64 / range.len() as f64;
        assert!(frac >= 0.98, "seed {seed}: agreement {frac}");
    }
}

#[test]
fn phase_signal_is_a_function_of_the_peaks() {
    let (trace, _) = gen_ecg(&SynthConfig::default()).unwrap();
    let ann = annotate(&trace, &EcgConfig::default()).unwrap();
    let a = build_phase_signal(&ann.peaks, trace.len(), trace.fs).unwrap();
    let b = build_phase_signal(&ann.peaks.clone(), trace.len(), trace.fs).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn detected_beats_are_ordered_and_windowed(hr in 40.0f64..120.0, snr in 10.0f64..30.0, seed in any::<u64>()) {
        let cfg = SynthConfig { heart_rate_bpm: hr, ecg_snr_db: Some(snr), seed, ..SynthConfig::default() };
        let (trace, _) = gen_ecg(&cfg).unwrap();
        let ann = annotate(&trace, &EcgConfig::default()).unwrap();
        let r = &ann.peaks.r_peaks;
        prop_assert!(r.windows(2).all(|w| w[1] - w[0] >= (0.2 * trace.fs) as usize));
        for b in &ann.peaks.beats {
            let (lo, hi) = t_window(b.r, b.next_r);
            if let Some(t) = b.t_peak {
                prop_assert!(lo <= t && t < hi);
                prop_assert!(b.r < t && t < b.eos);
            }
            prop_assert!(b.eos < b.next_r);
        }
    }

    #[test]
    fn symmetric_pulse_keeps_its_centre(c in 300usize..900, width in 5.0f64..40.0) {
        let samples: Vec<f64> = (0..1200).map(|i| (-((i as f64 - c as f64) / width).powi(2)).exp()).collect();
        let trace = EcgTrace::new(400.0, samples).unwrap();
        for out in [bandpass_zero_phase(&trace, 3.0, 45.0).unwrap(), lowpass_zero_phase(&trace, 10.0).unwrap()] {
            let peak = (0..out.len()).max_by(|&a, &b| out.samples[a].total_cmp(&out.samples[b])).unwrap();
            prop_assert!(peak.abs_diff(c) <= 1, "peak {} centre {}", peak, c);
        }
    }
}
