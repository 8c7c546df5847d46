use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use memwarp::detection::{average_precision, iou, propagate_boxes, BBox};
use memwarp::memory::{blend_weights, memnet_step, AggregationScheme, ClockConfig, Memory, WeightNets};
use memwarp::params::ParamStore;
use memwarp::tensor::{DisplacementField, FeatureMap};
use memwarp::warp::{compose_fields, warp};

fn map(h: usize, w: usize, c: usize, values: &[f64]) -> FeatureMap<f64> {
    FeatureMap::from_fn(h, w, c, |y, x, k| values[(y * w + x) * c + k])
}

fn close(a: &FeatureMap<f64>, b: &FeatureMap<f64>, tol: f64) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

prop_compose! {
    fn warp_case()(h in 1usize..8, w in 1usize..8, c in 1usize..4)
        (src_a in prop::collection::vec(-5.0f64..5.0, h * w * c),
         src_b in prop::collection::vec(-5.0f64..5.0, h * w * c),
         flow in prop::collection::vec(-3.0f64..3.0, h * w * 2),
         h in Just(h), w in Just(w), c in Just(c))
        -> (FeatureMap<f64>, FeatureMap<f64>, DisplacementField<f64>)
    {
        let field = DisplacementField::from_fn(h, w, |y, x| (flow[(y * w + x) * 2], flow[(y * w + x) * 2 + 1]));
        (map(h, w, c, &src_a), map(h, w, c, &src_b), field)
    }
}

fn boxes_strategy(frames: usize) -> impl Strategy<Value = Vec<Vec<BBox>>> {
    let one = (0.0f32..40.0, 0.0f32..40.0, 2.0f32..20.0, 2.0f32..20.0, 0usize..2, 0u32..1000)
        .prop_map(|(x, y, w, h, c, s)| BBox::new(x, y, x + w, y + h, c, s as f32 / 1000.0));
    prop::collection::vec(prop::collection::vec(one, 0..5), frames)
}

proptest! {
    #[test]
    fn warp_is_linear_in_the_source((a, b, field) in warp_case(), s in -2.0f64..2.0, t in -2.0f64..2.0) {
        let mixed = a.scale(s).add(&b.scale(t)).unwrap();
        let lhs = warp(&mixed, &field).unwrap();
        let rhs = warp(&a, &field).unwrap().scale(s).add(&warp(&b, &field).unwrap().scale(t)).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn zero_field_is_identity((a, _, field) in warp_case()) {
        let zero = DisplacementField::zeros(field.height(), field.width());
        prop_assert_eq!(warp(&a, &zero).unwrap(), a);
    }

    #[test]
    fn integer_shift_moves_pixels((a, _, _) in warp_case(), dx in -3i32..=3, dy in -3i32..=3) {
        let (h, w, c) = a.shape();
        let field = DisplacementField::constant(h, w, dx as f64, dy as f64);
        let out = warp(&a, &field).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as i32 + dy, x as i32 + dx);
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                for k in 0..c {
                    let want = if inside { a.get(sy as usize, sx as usize, k) } else { 0.0 };
                    prop_assert_eq!(out.get(y, x, k), want);
                }
            }
        }
    }

    #[test]
    fn constant_fields_compose_additively(h in 1usize..8, w in 1usize..8,
                                          a in (-3.0f64..3.0, -3.0f64..3.0), b in (-3.0f64..3.0, -3.0f64..3.0)) {
        let first = DisplacementField::constant(h, w, a.0, a.1);
        let second = DisplacementField::constant(h, w, b.0, b.1);
        let composed = compose_fields(&first, &second).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = composed.get(y, x);
                prop_assert!((dx - a.0 - b.0).abs() < 1e-12 && (dy - a.1 - b.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes_strategy(1), b in boxes_strategy(1)) {
        for p in a[0].iter() {
            prop_assert!((iou(p, p) - 1.0).abs() < 1e-6);
            for q in b[0].iter() {
                let (x, y) = (iou(p, q), iou(q, p));
                prop_assert_eq!(x, y);
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn ap_ignores_monotone_score_rescaling(dets in boxes_strategy(4), truth in boxes_strategy(4),
                                           scale in 0.1f32..10.0, shift in -1.0f32..1.0) {
        let base = average_precision(&dets, &truth, 2, 0.5).unwrap();
        let rescaled: Vec<Vec<BBox>> = dets
            .iter()
            .map(|f| f.iter().map(|b| BBox { score: scale * b.score.exp() + shift, ..*b }).collect())
            .collect();
        let other = average_precision(&rescaled, &truth, 2, 0.5).unwrap();
        prop_assert_eq!(&base, &other);
        prop_assert!((0.0..=1.0).contains(&base.mean));
    }

    #[test]
    fn truth_as_detections_scores_positive(truth in boxes_strategy(3)) {
        let dets: Vec<Vec<BBox>> = truth.iter().map(|f| f.iter().map(|b| BBox { score: 1.0, ..*b }).collect()).collect();
        let report = average_precision(&dets, &truth, 2, 0.5).unwrap();
        for ap in report.per_class.iter().flatten() {
            // overlapping truth boxes of one class can steal each other's match
            prop_assert!(*ap > 0.0 && *ap <= 1.0);
        }
    }

    #[test]
    fn constant_field_translates_boxes(x in 8.0f32..24.0, y in 8.0f32..24.0, dx in -1.0f32..1.0, dy in -1.0f32..1.0) {
        let stride = 4;
        let b = BBox::new(x, y, x + 12.0, y + 12.0, 0, 0.9);
        let field = DisplacementField::constant(16, 16, dx, dy);
        let moved = propagate_boxes(&[b], &field, stride, (64, 64))[0];
        let want = b.translate(dx * stride as f32, dy * stride as f32);
        prop_assert!((moved.x0 - want.x0).abs() < 1e-4 && (moved.y1 - want.y1).abs() < 1e-4);
        prop_assert_eq!(moved.score, b.score);
    }

    #[test]
    fn blend_weights_sum_to_one(seed in 0u64..1000, c in 1usize..6, h in 1usize..6, w in 1usize..6,
                                values in prop::collection::vec(-4.0f64..4.0, 2 * 36 * 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let nets = WeightNets::register(&mut store, &mut rng, "memory", c).unwrap();
        let m = map(h, w, c, &values);
        let f = map(h, w, c, &values[36 * 6..]);
        let (am, af) = blend_weights(&m, &f, &nets, &store).unwrap();
        for (a, b) in am.data().iter().zip(af.data()) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn averaged_memory_stays_in_evidence_hull(frames in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let params = ParamStore::<f64>::new();
        let zero = DisplacementField::<f64>::zeros(2, 2);
        let mut state = Memory::<f64>::new(&ClockConfig::single());
        for (j, v) in frames.iter().enumerate() {
            let e = FeatureMap::filled(2, 2, 1, *v);
            state = memnet_step(state, Some(&e), (j > 0).then_some(&zero), &AggregationScheme::Average, &params).unwrap();
        }
        let lo = frames.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = frames.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in state.fused().unwrap().data() {
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}
