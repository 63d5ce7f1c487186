use proptest::prelude::*;
use tagground::data::EventList;
use tagground::eval::{EvalConfig, EvalTrack, decode_events, match_events, psds, roc_points, th_auc};

fn segments(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0u32..200, 1u32..60), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(a, len)| (a as f64 * 0.01, (a + len) as f64 * 0.01))
            .collect()
    })
}

fn events(s: Vec<(f64, f64)>) -> EventList {
    EventList::new(s).unwrap()
}

fn track(id: usize, probs: Vec<f64>, gt: Vec<(f64, f64)>) -> EvalTrack {
    EvalTrack {
        clip_id: format!("c{id}"),
        phrase: "p".into(),
        probs,
        hop_seconds: 0.01,
        gt: events(gt),
    }
}

fn tracks() -> impl Strategy<Value = Vec<EvalTrack>> {
    prop::collection::vec(
        (prop::collection::vec(0.0f64..1.0, 20..60), 0u32..10, 1u32..10),
        1..6,
    )
    .prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (probs, a, len))| {
                let end = ((a + len) as usize).min(probs.len());
                let gt = vec![(a as f64 * 0.01, end as f64 * 0.01)];
                track(i, probs, gt)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn counts_conserve_ground_truth(p in segments(6), g in segments(6), rho in 0.05f64..1.0) {
        let (pred, gt) = (events(p), events(g));
        let m = match_events(&pred, &gt, rho);
        prop_assert_eq!(m.tp + m.fn_, gt.len());
        prop_assert_eq!(m.tp + m.fp, pred.len());
    }

    #[test]
    fn matching_ignores_order(p in segments(6), g in segments(6), rho in 0.05f64..1.0) {
        let base = match_events(&events(p.clone()), &events(g.clone()), rho);
        let (mut pr, mut gr) = (p, g);
        pr.reverse();
        gr.reverse();
        prop_assert_eq!(match_events(&events(pr), &events(gr), rho), base);
    }

    #[test]
    fn false_positive_never_raises_tp(p in segments(5), g in segments(5), extra in segments(3), rho in 0.05f64..1.0) {
        let base = match_events(&events(p.clone()), &events(g.clone()), rho);
        // shifted past every ground-truth span
        let mut more = p;
        more.extend(extra.iter().map(|&(a, b)| (a + 3.0, b + 3.0)));
        let m = match_events(&events(more), &events(g), rho);
        prop_assert_eq!(m.tp, base.tp);
        prop_assert_eq!(m.fp, base.fp + extra.len());
    }

    #[test]
    fn decoded_segments_cover_exactly_the_frames_above_threshold(
        probs in prop::collection::vec(0.0f64..1.0, 1..80),
        theta in 0.0f64..1.0,
    ) {
        let ev = decode_events(&probs, theta, 0.01).unwrap();
        let mut covered = vec![false; probs.len()];
        for &(a, b) in &ev.segments {
            let (a, b) = ((a / 0.01).round() as usize, (b / 0.01).round() as usize);
            for c in &mut covered[a..b] {
                prop_assert!(!*c);
                *c = true;
            }
        }
        for (p, c) in probs.iter().zip(&covered) {
            prop_assert_eq!(*p > theta, *c);
        }
    }

    #[test]
    fn metrics_stay_in_range_and_ignore_track_order(ts in tracks()) {
        let cfg = EvalConfig::default();
        let p = psds(&roc_points(&ts, &cfg).unwrap(), cfg.e_max).unwrap();
        let a = th_auc(&ts, &cfg).unwrap();
        prop_assert!((0.0..=100.0).contains(&p));
        prop_assert!((0.0..=100.0).contains(&a));
        let mut rev = ts.clone();
        rev.reverse();
        prop_assert_eq!(psds(&roc_points(&rev, &cfg).unwrap(), cfg.e_max).unwrap(), p);
        prop_assert_eq!(th_auc(&rev, &cfg).unwrap(), a);
    }

    #[test]
    fn envelope_tpr_never_decreases(ts in tracks()) {
        let pts = roc_points(&ts, &EvalConfig::default()).unwrap();
        for w in pts.windows(2) {
            prop_assert!(w[0].fpr <= w[1].fpr);
            prop_assert!(w[0].tpr <= w[1].tpr);
        }
    }
}
