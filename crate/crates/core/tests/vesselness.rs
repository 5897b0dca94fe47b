use angiophase::vesselness::{
    dice_score, jaccard_grad, jaccard_loss, rasterize_mask, select_frame_interval, CenterlineAnnotation,
    CenterlinePoint, Mask, JACCARD_MU,
};
use proptest::prelude::*;

fn brute_disc(points: &[CenterlinePoint], w: usize, h: usize) -> Vec<bool> {
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            points
                .iter()
                .any(|p| (x - p.x).powi(2) + (y - p.y).powi(2) <= p.radius * p.radius)
        })
        .collect()
}

fn points() -> impl Strategy<Value = Vec<CenterlinePoint>> {
    prop::collection::vec(
        (-2.0f64..18.0, -2.0f64..18.0, 0.0f64..4.0).prop_map(|(x, y, radius)| CenterlinePoint { x, y, radius }),
        0..8,
    )
}

fn ann(points: Vec<CenterlinePoint>) -> CenterlineAnnotation {
    CenterlineAnnotation { vessels: vec![points] }
}

#[test]
fn dice_examples() {
    let mut a = Mask::empty(4, 4);
    let b = a.clone();
    assert_eq!(dice_score(&a, &b).unwrap(), 1.0);
    a.data[0] = true;
    assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
    assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    assert_eq!(dice_score(&a, &Mask::empty(3, 4)).unwrap_err().category(), "ShapeError");
}

#[test]
fn interval_examples() {
    let s = [0.0, 0.0, 0.9, 1.0, 0.95, 0.1, 0.8, 0.9];
    let iv = select_frame_interval(&s).unwrap();
    assert_eq!((iv.start, iv.end), (2, 4));
    // Equal runs: the first wins.
    let iv = select_frame_interval(&[1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
    assert_eq!((iv.start, iv.end), (0, 1));
    assert_eq!(select_frame_interval(&[]).unwrap_err().category(), "SequenceTooShort");
}

proptest! {
    #[test]
    fn rasterization_matches_the_disc_rule(p in points()) {
        let m = rasterize_mask(&ann(p.clone()), 16, 16);
        prop_assert_eq!(m.data, brute_disc(&p, 16, 16));
    }

    #[test]
    fn growing_a_radius_never_clears_pixels(p in points(), extra in 0.0f64..2.0) {
        let grown: Vec<CenterlinePoint> = p.iter().map(|q| CenterlinePoint { radius: q.radius + extra, ..*q }).collect();
        let a = rasterize_mask(&ann(p), 16, 16);
        let b = rasterize_mask(&ann(grown), 16, 16);
        prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| !x || *y));
    }

    #[test]
    fn jaccard_stays_in_unit_interval(
        pt in prop::collection::vec((0.0f64..=1.0, prop::bool::ANY), 1..64),
    ) {
        let p: Vec<f64> = pt.iter().map(|x| x.0).collect();
        let t: Vec<f64> = pt.iter().map(|x| f64::from(u8::from(x.1))).collect();
        let l = jaccard_loss(&p, &t, JACCARD_MU).unwrap();
        prop_assert!((0.0..1.0).contains(&l), "loss {}", l);
        prop_assert_eq!(jaccard_loss(&t, &t, JACCARD_MU).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_gradient_matches_central_differences(
        pt in prop::collection::vec((0.05f64..0.95, prop::bool::ANY), 2..32),
        i in 0usize..32,
    ) {
        let p: Vec<f64> = pt.iter().map(|x| x.0).collect();
        let t: Vec<f64> = pt.iter().map(|x| f64::from(u8::from(x.1))).collect();
        let i = i % p.len();
        let h = 1e-6;
        let (mut a, mut b) = (p.clone(), p.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (jaccard_loss(&a, &t, JACCARD_MU).unwrap() - jaccard_loss(&b, &t, JACCARD_MU).unwrap()) / (2.0 * h);
        let g = jaccard_grad(&p, &t, JACCARD_MU).unwrap()[i];
        prop_assert!((fd - g).abs() <= 1e-3 * fd.abs().max(g.abs()).max(1e-6));
    }

    #[test]
    fn selected_interval_is_a_longest_run(s in prop::collection::vec(0.0f64..1.0, 1..60)) {
        let iv = select_frame_interval(&s).unwrap();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let keep = |v: f64| 3.0 * v >= 2.0 * max;
        prop_assert!(iv.indices().all(|k| keep(s[k])));
        prop_assert!(iv.start == 0 || !keep(s[iv.start - 1]));
        prop_assert!(iv.end + 1 == s.len() || !keep(s[iv.end + 1]));
        // No run is longer, and no earlier run is as long.
        let mut run = 0;
        for (k, &v) in s.iter().enumerate() {
            run = if keep(v) { run + 1 } else { 0 };
            prop_assert!(run <= iv.len());
            if k < iv.end {
                prop_assert!(run < iv.len() || k + 1 - run == iv.start);
            }
        }
    }

    #[test]
    fn interval_ignores_positive_scaling(s in prop::collection::vec(0.0f64..1.0, 1..60), k in 1u32..8) {
        // Powers of two keep every comparison exact.
        let scale = f64::from(1u32 << k);
        let scaled: Vec<f64> = s.iter().map(|v| v * scale).collect();
        prop_assert_eq!(select_frame_interval(&s).unwrap(), select_frame_interval(&scaled).unwrap());
    }
}
