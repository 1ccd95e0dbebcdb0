use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fetrack::aggregation::{aggregate_latest_polarity, bin_events, BinSpec};
use fetrack::autodiff::{Graph, Tensor};
use fetrack::bbox::{center_error, iou, BBox};
use fetrack::event_stream::{slice, Event, EventStream};
use fetrack::heads::argmax;
use fetrack::loss::bbox_loss;
use fetrack::metrics::{evaluate, precision_curve, success_curve};

const W: usize = 8;
const H: usize = 6;

fn events(max: usize) -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec((0u64..300, 0..W as u16, 0..H as u16, prop::bool::ANY), 0..max).prop_map(|v| {
        let mut ev: Vec<Event> = v.into_iter().map(|(t, x, y, p)| Event::new(t, x, y, if p { 1 } else { -1 })).collect();
        ev.sort_by_key(|e| e.t);
        ev
    })
}

fn int_box() -> impl Strategy<Value = BBox> {
    (-50i32..50, -50i32..50, 1i32..40, 1i32..40).prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, w as f64, h as f64))
}

proptest! {
    #[test]
    fn slice_is_idempotent(ev in events(120), a in 0u64..300, len in 0u64..300, closed in prop::bool::ANY) {
        let s = EventStream::new(W, H, ev);
        let b = a + len;
        let once = slice(&s, a, b, closed).unwrap();
        prop_assert_eq!(slice(&once, a, b, closed).unwrap(), once);
    }

    #[test]
    fn bins_partition_the_closed_interval(ev in events(150), t0 in 0u64..100, span in 1u64..250, n in 1usize..7) {
        let s = EventStream::new(W, H, ev);
        let spec = BinSpec::new(t0, t0 + span, n).unwrap();
        let bins = bin_events(&s, &spec).unwrap();
        prop_assert_eq!(bins.len(), n);
        let joined: Vec<Event> = bins.iter().flat_map(|b| b.events().iter().copied()).collect();
        prop_assert_eq!(joined, slice(&s, t0, t0 + span, true).unwrap().into_events());
    }

    #[test]
    fn latest_polarity_range_and_support(ev in events(80)) {
        let s = EventStream::new(W, H, ev);
        let out = aggregate_latest_polarity(&s, W, H);
        prop_assert!(out.iter().all(|v| matches!(v, 0 | 127 | 255)));
        let pixels: BTreeSet<(u16, u16)> = s.events().iter().map(|e| (e.x, e.y)).collect();
        prop_assert!(out.iter().filter(|&&v| v != 127).count() <= pixels.len());
    }

    #[test]
    fn latest_polarity_ignores_order_of_distinct_events(ev in events(80), seed in any::<u64>()) {
        let mut seen = BTreeMap::new();
        for e in ev {
            seen.entry((e.x, e.y, e.t)).or_insert(e);
        }
        let mut ev: Vec<Event> = seen.into_values().collect();
        let before = aggregate_latest_polarity(&EventStream::new(W, H, ev.clone()), W, H);
        ev.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(aggregate_latest_polarity(&EventStream::new(W, H, ev), W, H), before);
    }

    #[test]
    fn elementwise_op_ranges(seed in any::<u64>(), c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[2, c, h, w], -30.0, 30.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let s = g.sigmoid(xv);
        let r = g.relu(xv);
        let p = g.adaptive_avg_pool(xv).unwrap();
        prop_assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(g.value(r).data().iter().all(|&v| v >= 0.0));
        let plane = h * w;
        for (k, &m) in g.value(p).data().iter().enumerate() {
            let mean = x.data()[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64;
            prop_assert!((m - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn bbox_loss_ignores_pair_order(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40), seed in any::<u64>()) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let l = bbox_loss(&p, &t).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (p2, t2): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
        prop_assert!((bbox_loss(&p2, &t2).unwrap() - l).abs() <= 1e-12 * l.max(1.0));
    }

    #[test]
    fn argmax_survives_positive_scaling(scores in prop::collection::vec(-5.0f64..5.0, 1..64), k in 0.01f64..100.0) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * k).collect();
        prop_assert_eq!(argmax(&scaled), argmax(&scores));
    }

    #[test]
    fn iou_translation_and_scale(a in int_box(), b in int_box(), dx in -100i32..100, dy in -100i32..100, e in -3i32..4) {
        let (dx, dy) = (dx as f64, dy as f64);
        let k = 2f64.powi(e);
        let shift = |b: &BBox| BBox::new(b.x + dx, b.y + dy, b.w, b.h);
        let scale = |b: &BBox| BBox::new(b.x * k, b.y * k, b.w * k, b.h * k);
        let v = iou(&a, &b).unwrap();
        prop_assert_eq!(iou(&shift(&a), &shift(&b)).unwrap(), v);
        prop_assert_eq!(iou(&scale(&a), &scale(&b)).unwrap(), v);
        prop_assert_eq!(center_error(&shift(&a), &shift(&b)), center_error(&a, &b));
    }

    #[test]
    fn metrics_ignore_common_translation(boxes in prop::collection::vec((int_box(), int_box()), 2..30), dx in -100i32..100, dy in -100i32..100) {
        let shift = |b: &BBox| BBox::new(b.x + dx as f64, b.y + dy as f64, b.w, b.h);
        let pred: BTreeMap<usize, BBox> = boxes.iter().enumerate().map(|(j, (p, _))| (j, *p)).collect();
        let gt: BTreeMap<usize, BBox> = boxes.iter().enumerate().map(|(j, (_, g))| (j, *g)).collect();
        let pred_s = pred.iter().map(|(j, b)| (*j, shift(b))).collect();
        let gt_s = gt.iter().map(|(j, b)| (*j, shift(b))).collect();
        let a = evaluate("a", &[], &pred, &gt).unwrap();
        let b = evaluate("b", &[], &pred_s, &gt_s).unwrap();
        prop_assert_eq!((a.rsr, a.rpr, a.op50, a.op75), (b.rsr, b.rpr, b.op50, b.op75));
    }

    #[test]
    fn curves_are_monotone(ious in prop::collection::vec(0.0f64..=1.0, 1..50), errs in prop::collection::vec(0.0f64..80.0, 1..50)) {
        let s = success_curve(&ious).unwrap();
        let p = precision_curve(&errs).unwrap();
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(p.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(s.iter().chain(&p).all(|v| (0.0..=1.0).contains(v)));
    }
}
